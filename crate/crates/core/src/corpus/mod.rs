//! Synthetic question-answer corpus with labeled corruptions.
//!
//! Everything here is a pure function of its arguments including the seed,
//! so corpora regenerate byte-identically from a config echo.

pub mod corrupt;
pub mod io;
pub mod vocab;
pub mod world;

pub use corrupt::{
    build_mixture, corrupt_cut, corrupt_delete, corrupt_exchange, CorruptionOptions, CutLimit,
    MixtureFractions,
};
pub use io::{read_dataset, write_dataset, write_samples};
pub use vocab::{TokenId, Vocab, ANSWER_START, END_OF_SEQUENCE, PAD, QUESTION_START};
pub use world::{generate_world, World, DEFAULT_VALUE_POOL, MAX_FACTS};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Ground-truth provenance of a training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Clean,
    Cut,
    Delete,
    Exchange,
}

impl Provenance {
    pub const CORRUPT: [Provenance; 3] =
        [Provenance::Cut, Provenance::Delete, Provenance::Exchange];

    pub fn is_clean(self) -> bool {
        self == Provenance::Clean
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Clean => "clean",
            Provenance::Cut => "cut",
            Provenance::Delete => "delete",
            Provenance::Exchange => "exchange",
        }
    }
}

/// A tokenized question-answer pair with its ground-truth label.
///
/// `origin_id` is the sample's own id except for exchange corruptions, where
/// it records the answer donor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: u64,
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub provenance: Provenance,
    pub origin_id: u64,
}

impl Sample {
    pub fn is_clean(&self) -> bool {
        self.provenance.is_clean()
    }
}

/// Mixed-quality dataset with its realized class counts.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub mixture: MixtureCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureCounts {
    pub clean: usize,
    pub cut: usize,
    pub delete: usize,
    pub exchange: usize,
}

impl MixtureCounts {
    pub fn tally(samples: &[Sample]) -> MixtureCounts {
        let mut counts = MixtureCounts {
            clean: 0,
            cut: 0,
            delete: 0,
            exchange: 0,
        };
        for s in samples {
            match s.provenance {
                Provenance::Clean => counts.clean += 1,
                Provenance::Cut => counts.cut += 1,
                Provenance::Delete => counts.delete += 1,
                Provenance::Exchange => counts.exchange += 1,
            }
        }
        counts
    }

    pub fn total(&self) -> usize {
        self.clean + self.cut + self.delete + self.exchange
    }

    pub fn corrupt(&self) -> usize {
        self.cut + self.delete + self.exchange
    }
}

impl LabeledDataset {
    pub fn from_samples(samples: Vec<Sample>) -> LabeledDataset {
        let mixture = MixtureCounts::tally(&samples);
        LabeledDataset { samples, mixture }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn by_id(&self, id: u64) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

fn render_question(world: &World, entity: usize, attribute: usize) -> String {
    format!(
        "what is {} of {} ?",
        world.attributes[attribute], world.entities[entity]
    )
}

fn render_answer(world: &World, entity: usize, attribute: usize) -> String {
    format!(
        "the {} of {} is {} .",
        world.attributes[attribute],
        world.entities[entity],
        world.fact(entity, attribute)
    )
}

/// Renders `count` clean samples from facts drawn (with replacement) by the
/// stream named "qa", tokenized against the closed vocabulary.
pub fn synthesize_samples(
    world: &World,
    vocab: &Vocab,
    count: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::config("sample count must be at least 1"));
    }
    let mut rng = rng::stream(seed, "qa");
    let mut samples = Vec::with_capacity(count);
    for id in 0..count as u64 {
        let entity = rng.random_range(0..world.entities.len());
        let attribute = rng.random_range(0..world.attributes.len());
        let question = vocab
            .encode(&render_question(world, entity, attribute))
            .map_err(|e| Error::data(format!("question template token missing: {e}")))?;
        let answer = vocab
            .encode(&render_answer(world, entity, attribute))
            .map_err(|e| Error::data(format!("answer template token missing: {e}")))?;
        samples.push(Sample {
            id,
            question,
            answer,
            provenance: Provenance::Clean,
            origin_id: id,
        });
    }
    Ok(samples)
}

/// Checks a sample's answer against the world's fact table. Only meaningful
/// for samples rendered by [`synthesize_samples`] templates.
pub fn answer_matches_world(world: &World, vocab: &Vocab, sample: &Sample) -> bool {
    let question = match vocab.decode(&sample.question) {
        Ok(q) => q,
        Err(_) => return false,
    };
    let words: Vec<&str> = question.split_whitespace().collect();
    // "what is <attribute> of <entity> ?"
    if words.len() != 6 {
        return false;
    }
    let attribute = match world.attributes.iter().position(|a| a == words[2]) {
        Some(a) => a,
        None => return false,
    };
    let entity = match world.entities.iter().position(|e| e == words[4]) {
        Some(e) => e,
        None => return false,
    };
    match vocab.encode(&render_answer(world, entity, attribute)) {
        Ok(expected) => expected == sample.answer,
        Err(_) => false,
    }
}
