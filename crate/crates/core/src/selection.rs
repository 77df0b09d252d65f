//! The three selection principles compared in the ablation: local
//! proportion-based dropping, a pooled global quantile, and the anchor
//! threshold. Ties at any cutoff are kept, matching the phase II filter.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoreRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "principle")]
pub enum SelectionPrinciple {
    /// Drop the lowest-scored `q` fraction locally; needs oracle knowledge
    /// of the global low-quality share.
    ByProportion { q: f64 },
    /// Pool all client scores at the server, cut at the q-quantile; needs
    /// score uploads and oracle knowledge of `q`.
    GlobalQuantile { q: f64 },
    /// Keep everything scoring at or above the anchor threshold; needs
    /// neither uploads nor knowledge of the corruption share.
    AnchorThreshold { threshold: f64 },
}

/// Sorts by quality descending (ties by sample id ascending) and drops the
/// `floor(q * n)` lowest-scored samples.
pub fn select_by_proportion(scores: &[ScoreRecord], q: f64) -> Result<BTreeSet<u64>> {
    if scores.is_empty() {
        return Err(Error::data("selection needs at least one score"));
    }
    if !(0.0..1.0).contains(&q) {
        return Err(Error::config(format!(
            "low-quality proportion must lie in [0, 1), got {q}"
        )));
    }
    let mut ordered: Vec<&ScoreRecord> = scores.iter().collect();
    ordered.sort_by(|a, b| {
        b.quality
            .partial_cmp(&a.quality)
            .expect("qualities are finite")
            .then(a.sample_id.cmp(&b.sample_id))
    });
    let drop = (q * scores.len() as f64).floor() as usize;
    let keep = scores.len() - drop;
    Ok(ordered[..keep].iter().map(|r| r.sample_id).collect())
}

/// Lower-interpolation quantile: the element at `floor(q * (n - 1))` of the
/// ascending order.
pub fn lower_quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("values are finite"));
    let ix = (q * (sorted.len() - 1) as f64).floor() as usize;
    sorted[ix.min(sorted.len() - 1)]
}

/// Pools every client's qualities, thresholds at the q-quantile (lower
/// interpolation), and keeps per-client samples at or above it. Returns the
/// kept sets and the pooled threshold.
pub fn select_by_global_quantile(
    per_client: &[Vec<ScoreRecord>],
    q: f64,
) -> Result<(Vec<BTreeSet<u64>>, f64)> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::config(format!(
            "low-quality proportion must lie in [0, 1), got {q}"
        )));
    }
    let pooled: Vec<f64> = per_client.iter().flatten().map(|r| r.quality).collect();
    if pooled.is_empty() {
        return Err(Error::data("selection needs at least one score"));
    }
    let threshold = lower_quantile(&pooled, q);
    let kept = per_client
        .iter()
        .map(|scores| {
            scores
                .iter()
                .filter(|r| r.quality >= threshold)
                .map(|r| r.sample_id)
                .collect()
        })
        .collect();
    Ok((kept, threshold))
}

/// Keeps samples whose quality is at or above the anchor threshold.
pub fn select_by_anchor(scores: &[ScoreRecord], threshold: f64) -> BTreeSet<u64> {
    scores
        .iter()
        .filter(|r| r.quality >= threshold)
        .map(|r| r.sample_id)
        .collect()
}

/// Per-client outcome line for the selection report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionReportRow {
    pub client_id: usize,
    pub kept: usize,
    pub dropped: usize,
    /// Ground-truth low-quality share among kept samples; `None` when
    /// nothing was kept.
    pub kept_low_quality_proportion: Option<f64>,
}
