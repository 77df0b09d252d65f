//! Data quality control for federated fine-tuning, at desk scale.
//!
//! The library synthesizes mixed-quality question-answer corpora with
//! ground-truth corruption labels, scores every training sample against a
//! small trainable language model, derives a global quality threshold from a
//! tiny server-held anchor set, filters each client's data, and runs
//! federated averaging over low-rank adapters on what survives. Every stage
//! is a deterministic function of one experiment seed.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod rng;
pub mod scoring;
pub mod selection;

pub use error::{Error, Result};
