//! Synthetic fact world: a total mapping (entity, attribute) -> value.
//!
//! The world is the ground truth behind every question-answer pair, which is
//! what makes exchanged answers provably wrong and filter quality measurable.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Hard cap on entities x attributes, named in the error when exceeded.
pub const MAX_FACTS: usize = 1_000_000;

pub const DEFAULT_VALUE_POOL: usize = 40;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub entities: Vec<String>,
    pub attributes: Vec<String>,
    pub values: Vec<String>,
    /// Entity-major fact table: `facts[e * attributes.len() + a]` indexes
    /// into `values`.
    facts: Vec<usize>,
}

/// Builds a total fact table with values drawn uniformly from a pool of
/// `num_values` value tokens by the stream named "world".
pub fn generate_world(
    seed: u64,
    num_entities: usize,
    num_attributes: usize,
    num_values: usize,
) -> Result<World> {
    if num_entities == 0 || num_attributes == 0 {
        return Err(Error::config(
            "world needs at least one entity and one attribute",
        ));
    }
    if num_values == 0 {
        return Err(Error::config("world needs a nonempty value pool"));
    }
    let product = num_entities
        .checked_mul(num_attributes)
        .filter(|p| *p <= MAX_FACTS)
        .ok_or_else(|| {
            Error::config(format!(
                "fact table {num_entities} x {num_attributes} exceeds the corpus cap of {MAX_FACTS} facts"
            ))
        })?;

    let entities = (0..num_entities).map(|i| format!("ent{i}")).collect();
    let attributes = (0..num_attributes).map(|i| format!("attr{i}")).collect();
    let values = (0..num_values).map(|i| format!("val{i}")).collect();

    let mut rng = rng::stream(seed, "world");
    let facts = (0..product)
        .map(|_| rng.random_range(0..num_values))
        .collect();

    Ok(World {
        seed,
        entities,
        attributes,
        values,
        facts,
    })
}

impl World {
    pub fn num_facts(&self) -> usize {
        self.facts.len()
    }

    pub fn value_index(&self, entity: usize, attribute: usize) -> usize {
        self.facts[entity * self.attributes.len() + attribute]
    }

    /// The value token for one fact.
    pub fn fact(&self, entity: usize, attribute: usize) -> &str {
        &self.values[self.value_index(entity, attribute)]
    }
}
