//! Closed whitespace-token vocabulary.
//!
//! Token ids are dense indices `0..V`; the four special markers occupy the
//! reserved ids 0..=3. Tokenization is an exact whitespace split, so
//! string -> id -> string round-trips on every vocabulary member.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::world::World;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const QUESTION_START: TokenId = 0;
pub const ANSWER_START: TokenId = 1;
pub const END_OF_SEQUENCE: TokenId = 2;
pub const PAD: TokenId = 3;

pub const MARKER_TOKENS: [&str; 4] = ["<q>", "<a>", "<eos>", "<pad>"];

/// Words used by the question/answer templates, fixed ids right after the
/// markers.
pub const TEMPLATE_TOKENS: [&str; 6] = ["what", "is", "of", "the", "?", "."];

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < MARKER_TOKENS.len() + 1 {
            return Err(Error::data(format!(
                "vocabulary needs the {} reserved markers plus content tokens, got {} tokens",
                MARKER_TOKENS.len(),
                tokens.len()
            )));
        }
        for (i, marker) in MARKER_TOKENS.iter().enumerate() {
            if tokens[i] != *marker {
                return Err(Error::data(format!(
                    "vocabulary line {i} must be the reserved marker {marker:?}, got {:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::data(format!(
                    "token {id} ({tok:?}) is empty or contains whitespace"
                )));
            }
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::data(format!("duplicate token {tok:?} at id {id}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Vocabulary covering the markers, template words and the world's
    /// entity, attribute and value names.
    pub fn for_world(world: &World) -> Vocab {
        let mut tokens: Vec<String> = MARKER_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(TEMPLATE_TOKENS.iter().map(|s| s.to_string()));
        tokens.extend(world.attributes.iter().cloned());
        tokens.extend(world.entities.iter().cloned());
        tokens.extend(world.values.iter().cloned());
        Vocab::from_tokens(tokens).expect("world token names are distinct and whitespace-free")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace-split tokenization over the closed vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|tok| {
                self.id(tok)
                    .ok_or_else(|| Error::data(format!("token {tok:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let words: Result<Vec<&str>> = ids
            .iter()
            .map(|&id| {
                self.token(id)
                    .ok_or_else(|| Error::data(format!("token id {id} out of range")))
            })
            .collect();
        Ok(words?.join(" "))
    }

    /// One token per line; line number = token id.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        crate::experiment::atomic_write(path, body.as_bytes())
    }

    pub fn read_from(path: &Path) -> Result<Vocab> {
        let body = fs::read_to_string(path)?;
        let tokens: Vec<String> = body.lines().map(str::to_string).collect();
        Vocab::from_tokens(tokens)
    }
}
