//! Ground-truth-aware measurement: validation perplexity, filter confusion
//! and the corruption-proportion sweep rows.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::model::{answer_span, sample_tokens, sequence_logprob, ModelParams};

/// Token-weighted perplexity over answer tokens: exp of the total negative
/// log-likelihood divided by the total answer-token count, so a 3-token
/// answer weighs three times a 1-token one.
pub fn validation_perplexity(params: &ModelParams, validation: &[Sample]) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::data("validation set must be nonempty"));
    }
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    for sample in validation {
        let tokens = sample_tokens(sample);
        let mut span = answer_span(sample);
        span.end -= 1; // answer tokens only, not the end marker
        let score = sequence_logprob(params, &tokens, span)?;
        total_nll -= score.per_token.iter().sum::<f64>();
        total_tokens += score.per_token.len();
    }
    let ppl = (total_nll / total_tokens as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite validation perplexity {ppl}"
        )));
    }
    Ok(ppl)
}

/// Kept/dropped counts split by ground-truth cleanliness. Ratios with a zero
/// denominator are reported as undefined, never as zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfusion {
    pub kept_clean: usize,
    pub kept_corrupt: usize,
    pub dropped_clean: usize,
    pub dropped_corrupt: usize,
}

impl FilterConfusion {
    pub fn total(&self) -> usize {
        self.kept_clean + self.kept_corrupt + self.dropped_clean + self.dropped_corrupt
    }

    pub fn kept(&self) -> usize {
        self.kept_clean + self.kept_corrupt
    }

    /// Share of kept samples that are clean.
    pub fn precision(&self) -> Option<f64> {
        ratio(self.kept_clean, self.kept())
    }

    /// Share of clean samples that were kept.
    pub fn recall(&self) -> Option<f64> {
        ratio(self.kept_clean, self.kept_clean + self.dropped_clean)
    }

    /// Share of kept samples that are corrupted: the ablation's y-axis.
    pub fn kept_low_quality_proportion(&self) -> Option<f64> {
        ratio(self.kept_corrupt, self.kept())
    }

    pub fn merge(&mut self, other: &FilterConfusion) {
        self.kept_clean += other.kept_clean;
        self.kept_corrupt += other.kept_corrupt;
        self.dropped_clean += other.dropped_clean;
        self.dropped_corrupt += other.dropped_corrupt;
    }

    pub fn empty() -> FilterConfusion {
        FilterConfusion {
            kept_clean: 0,
            kept_corrupt: 0,
            dropped_clean: 0,
            dropped_corrupt: 0,
        }
    }
}

fn ratio(numerator: usize, denominator: usize) -> Option<f64> {
    if denominator == 0 {
        None
    } else {
        Some(numerator as f64 / denominator as f64)
    }
}

/// Counts a kept-id set against the dataset's ground-truth labels.
pub fn filter_confusion(dataset: &LabeledDataset, kept: &BTreeSet<u64>) -> Result<FilterConfusion> {
    let ids: BTreeSet<u64> = dataset.samples.iter().map(|s| s.id).collect();
    if let Some(unknown) = kept.iter().find(|id| !ids.contains(id)) {
        return Err(Error::data(format!(
            "kept set references unknown sample id {unknown}"
        )));
    }
    let mut confusion = FilterConfusion::empty();
    for sample in &dataset.samples {
        match (kept.contains(&sample.id), sample.is_clean()) {
            (true, true) => confusion.kept_clean += 1,
            (true, false) => confusion.kept_corrupt += 1,
            (false, true) => confusion.dropped_clean += 1,
            (false, false) => confusion.dropped_corrupt += 1,
        }
    }
    Ok(confusion)
}

/// One corruption-sweep measurement: an unfiltered federated run at the
/// given low-quality share.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub proportion: f64,
    pub seed: u64,
    pub final_perplexity: f64,
    pub rounds: usize,
}

/// One ablation measurement: kept volume and kept low-quality share for a
/// selection principle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub method: crate::scoring::MethodKind,
    pub principle: String,
    pub kept: usize,
    pub dropped: usize,
    pub kept_low_quality_proportion: Option<f64>,
}
