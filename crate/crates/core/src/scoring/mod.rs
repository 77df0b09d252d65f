//! Per-sample quality scoring under a common orientation contract.
//!
//! Every method yields a raw formula value and a `quality` that is a strictly
//! monotone transform of it with "higher = better" fixed per method, so
//! filter decisions depend on quality only:
//!
//! * perplexity: raw = exp(-mean log-prob) over the whole rendering,
//!   quality = -ln(raw);
//! * conditional probability: raw = Prob(A|Q) / Prob(A) over mean answer
//!   log-probs, quality = 1 - raw (breaking the question-answer dependence
//!   drives the ratio up toward and past 1);
//! * influence: raw = summed validation-gradient alignment through the
//!   damped inverse Hessian, quality = raw;
//! * in-context: raw = answer loss behind demonstration pairs,
//!   quality = -raw.

mod influence;

pub use influence::{score_influence, InfluenceBackend, InfluenceConfig};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    Provenance, Sample, TokenId, ANSWER_START, END_OF_SEQUENCE, PAD, QUESTION_START,
};
use crate::error::{Error, Result};
use crate::model::{sample_tokens, sequence_logprob, ModelParams};
use crate::rng;

/// Denominator guard for the conditional-probability ratio.
const CONPROB_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Ppl,
    ConProb,
    Influence,
    Icl,
}

impl MethodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Ppl => "ppl",
            MethodKind::ConProb => "conprob",
            MethodKind::Influence => "influence",
            MethodKind::Icl => "icl",
        }
    }
}

/// Scoring method plus its per-method knobs and the stream seed for
/// demonstration draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringConfig {
    pub method: MethodKind,
    pub influence: InfluenceConfig,
    /// Adapter warmup (steps, lr) on the server validation split applied
    /// before influence scoring, producing the scoring model.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub icl_demonstrations: usize,
    pub icl_max_prompt_tokens: usize,
    pub seed: u64,
}

impl ScoringConfig {
    pub fn new(method: MethodKind, seed: u64) -> ScoringConfig {
        ScoringConfig {
            method,
            influence: InfluenceConfig::default(),
            warmup_steps: 50,
            warmup_lr: 0.2,
            icl_demonstrations: 1,
            icl_max_prompt_tokens: 512,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: u64,
    pub method: MethodKind,
    /// Untransformed formula value.
    pub raw: f64,
    /// Orientation-normalized score, higher = better.
    pub quality: f64,
}

fn finite_record(record: ScoreRecord) -> Result<ScoreRecord> {
    if record.raw.is_finite() && record.quality.is_finite() {
        Ok(record)
    } else {
        Err(Error::numeric(format!(
            "non-finite {} score for sample {}: raw {}, quality {}",
            record.method.as_str(),
            record.sample_id,
            record.raw,
            record.quality
        )))
    }
}

/// Perplexity of the full rendering: every position after the opening marker
/// is scored. quality = -ln(raw), i.e. the mean log-probability.
pub fn score_ppl(params: &ModelParams, sample: &Sample) -> Result<ScoreRecord> {
    let tokens = sample_tokens(sample);
    let score = sequence_logprob(params, &tokens, 1..tokens.len())?;
    finite_record(ScoreRecord {
        sample_id: sample.id,
        method: MethodKind::Ppl,
        raw: (-score.mean).exp(),
        quality: score.mean,
    })
}

/// Mean answer-token log-probability given the question prefix, divided by
/// the same quantity with the question replaced by pad markers (identical
/// positional structure, no question content). quality = 1 - raw.
pub fn score_conprob(params: &ModelParams, sample: &Sample) -> Result<ScoreRecord> {
    let conditional_tokens = sample_tokens(sample);
    let span = crate::model::answer_span(sample);
    let conditional = sequence_logprob(params, &conditional_tokens, span.clone())?.mean;

    let mut unconditional_tokens = conditional_tokens;
    for tok in &mut unconditional_tokens[1..=sample.question.len()] {
        *tok = PAD;
    }
    let unconditional = sequence_logprob(params, &unconditional_tokens, span)?.mean;

    if unconditional.abs() < CONPROB_EPSILON {
        return Err(Error::numeric(format!(
            "degenerate conditional-probability denominator for sample {}: \
             the answer is near-certain unconditionally (|{unconditional}| < {CONPROB_EPSILON})",
            sample.id
        )));
    }
    let raw = conditional / unconditional;
    finite_record(ScoreRecord {
        sample_id: sample.id,
        method: MethodKind::ConProb,
        raw,
        quality: 1.0 - raw,
    })
}

/// Cross-entropy of the answer when the question is prefixed by
/// demonstration pairs drawn from the anchor pool. quality = -raw.
pub fn score_icl(
    params: &ModelParams,
    sample: &Sample,
    demonstrations: &[&Sample],
    max_prompt_tokens: usize,
) -> Result<ScoreRecord> {
    if demonstrations.is_empty() {
        return Err(Error::data(format!(
            "in-context scoring of sample {} needs at least one demonstration",
            sample.id
        )));
    }
    if demonstrations.iter().any(|d| d.id == sample.id) {
        return Err(Error::data(format!(
            "sample {} cannot serve as its own demonstration",
            sample.id
        )));
    }
    let mut tokens: Vec<TokenId> = Vec::new();
    for demo in demonstrations {
        tokens.extend(sample_tokens(demo));
    }
    tokens.push(QUESTION_START);
    tokens.extend_from_slice(&sample.question);
    tokens.push(ANSWER_START);
    let span_start = tokens.len();
    tokens.extend_from_slice(&sample.answer);
    tokens.push(END_OF_SEQUENCE);
    if tokens.len() > max_prompt_tokens {
        return Err(Error::data(format!(
            "in-context prompt for sample {} is {} tokens, over the {max_prompt_tokens}-token limit",
            sample.id,
            tokens.len()
        )));
    }
    let score = sequence_logprob(params, &tokens, span_start..tokens.len())?;
    finite_record(ScoreRecord {
        sample_id: sample.id,
        method: MethodKind::Icl,
        raw: -score.mean,
        quality: score.mean,
    })
}

/// Demonstrations for one target, drawn deterministically from the anchor
/// pool (excluding the target itself) by the stream named "icl".
fn draw_demonstrations(
    anchors: &[Sample],
    target_id: u64,
    count: usize,
    seed: u64,
) -> Result<Vec<&Sample>> {
    let pool: Vec<&Sample> = anchors.iter().filter(|a| a.id != target_id).collect();
    if pool.len() < count {
        return Err(Error::data(format!(
            "anchor pool has {} usable demonstrations for sample {target_id}, need {count}",
            pool.len()
        )));
    }
    let mut rng = rng::substream(seed, "icl", &[target_id]);
    let picks = rand::seq::index::sample(&mut rng, pool.len(), count);
    Ok(picks.iter().map(|ix| pool[ix]).collect())
}

/// Scores every sample under the configured method, output ordered by
/// sample id. Influence scoring treats `samples` as the train side and
/// `validation` as the probe side; the in-context method draws its
/// demonstrations from `anchors`.
pub fn score_samples(
    params: &ModelParams,
    samples: &[Sample],
    anchors: &[Sample],
    validation: &[Sample],
    config: &ScoringConfig,
) -> Result<Vec<ScoreRecord>> {
    let mut records = match config.method {
        MethodKind::Ppl => samples
            .iter()
            .map(|s| score_ppl(params, s))
            .collect::<Result<Vec<_>>>()?,
        MethodKind::ConProb => samples
            .iter()
            .map(|s| score_conprob(params, s))
            .collect::<Result<Vec<_>>>()?,
        MethodKind::Icl => samples
            .iter()
            .map(|s| {
                let demos =
                    draw_demonstrations(anchors, s.id, config.icl_demonstrations, config.seed)?;
                score_icl(params, s, &demos, config.icl_max_prompt_tokens)
            })
            .collect::<Result<Vec<_>>>()?,
        MethodKind::Influence => score_influence(params, samples, validation, &config.influence)?,
    };
    records.sort_by_key(|r| r.sample_id);
    Ok(records)
}

/// Mean anchor quality under the given method and model: the global
/// threshold broadcast to clients. Influence treats each anchor as a train
/// point against the server validation set.
pub fn compute_anchor_threshold(
    params: &ModelParams,
    anchors: &[Sample],
    validation: &[Sample],
    config: &ScoringConfig,
) -> Result<f64> {
    if anchors.is_empty() {
        return Err(Error::data("anchor set must be nonempty"));
    }
    if let Some(bad) = anchors.iter().find(|a| !a.is_clean()) {
        return Err(Error::data(format!(
            "anchor set must be clean, sample {} is {}",
            bad.id,
            bad.provenance.as_str()
        )));
    }
    let records = score_samples(params, anchors, anchors, validation, config)?;
    Ok(threshold_from_qualities(
        &records.iter().map(|r| r.quality).collect::<Vec<_>>(),
    ))
}

/// Arithmetic mean of anchor qualities.
pub fn threshold_from_qualities(qualities: &[f64]) -> f64 {
    qualities.iter().sum::<f64>() / qualities.len() as f64
}

/// One score-dump line: the record plus the ground-truth provenance, which
/// exists purely for downstream evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreDumpRecord {
    pub sample_id: u64,
    pub method: MethodKind,
    pub raw: f64,
    pub quality: f64,
    pub provenance: Provenance,
}

pub fn write_scores(
    path: &Path,
    records: &[ScoreRecord],
    provenance: &BTreeMap<u64, Provenance>,
) -> Result<()> {
    let mut body = String::new();
    for r in records {
        let label = provenance.get(&r.sample_id).copied().ok_or_else(|| {
            Error::data(format!("no provenance known for sample {}", r.sample_id))
        })?;
        let line = ScoreDumpRecord {
            sample_id: r.sample_id,
            method: r.method,
            raw: r.raw,
            quality: r.quality,
            provenance: label,
        };
        body.push_str(&serde_json::to_string(&line).map_err(|e| Error::data(e.to_string()))?);
        body.push('\n');
    }
    crate::experiment::atomic_write(path, body.as_bytes())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreDumpRecord>> {
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open score dump {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| {
            Error::data(format!(
                "{} line {}: malformed score record: {e}",
                path.display(),
                lineno + 1
            ))
        })?);
    }
    Ok(records)
}
