//! Report artifacts: round logs, the structured run report and its CSV
//! companion. Writers are deterministic so a rerun reproduces every byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Provenance;
use crate::error::{Error, Result};
use crate::evaluation::FilterConfusion;
use crate::experiment::atomic_write;
use crate::experiment::config::ExperimentConfig;
use crate::experiment::pipeline::RunArtifacts;
use crate::scoring::ScoreRecord;
use crate::selection::SelectionReportRow;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// A ratio that carries its numerator and denominator; `value` is absent
/// when the denominator is zero (undefined, never reported as zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub numerator: usize,
    pub denominator: usize,
    pub value: Option<f64>,
}

impl Ratio {
    pub fn new(numerator: usize, denominator: usize) -> Ratio {
        Ratio {
            numerator,
            denominator,
            value: if denominator == 0 {
                None
            } else {
                Some(numerator as f64 / denominator as f64)
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub kept_clean: usize,
    pub kept_corrupt: usize,
    pub dropped_clean: usize,
    pub dropped_corrupt: usize,
    pub precision: Ratio,
    pub recall: Ratio,
    pub kept_low_quality_proportion: Ratio,
}

impl From<&FilterConfusion> for ConfusionReport {
    fn from(c: &FilterConfusion) -> Self {
        ConfusionReport {
            kept_clean: c.kept_clean,
            kept_corrupt: c.kept_corrupt,
            dropped_clean: c.dropped_clean,
            dropped_corrupt: c.dropped_corrupt,
            precision: Ratio::new(c.kept_clean, c.kept()),
            recall: Ratio::new(c.kept_clean, c.kept_clean + c.dropped_clean),
            kept_low_quality_proportion: Ratio::new(c.kept_corrupt, c.kept()),
        }
    }
}

/// Quality statistics for one provenance class under the run's method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassScoreStats {
    pub provenance: Provenance,
    pub count: usize,
    pub mean_raw: f64,
    pub mean_quality: f64,
}

pub fn class_score_stats(
    scores: &[Vec<ScoreRecord>],
    provenance: &BTreeMap<u64, Provenance>,
) -> Vec<ClassScoreStats> {
    let mut grouped: BTreeMap<Provenance, (usize, f64, f64)> = BTreeMap::new();
    for record in scores.iter().flatten() {
        if let Some(&label) = provenance.get(&record.sample_id) {
            let entry = grouped.entry(label).or_insert((0, 0.0, 0.0));
            entry.0 += 1;
            entry.1 += record.raw;
            entry.2 += record.quality;
        }
    }
    grouped
        .into_iter()
        .map(
            |(provenance, (count, raw_sum, quality_sum))| ClassScoreStats {
                provenance,
                count,
                mean_raw: raw_sum / count as f64,
                mean_quality: quality_sum / count as f64,
            },
        )
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub seed: u64,
    /// Full config echo; re-running from it reproduces this report.
    pub config: String,
    pub selection_principle: String,
    pub scoring_method: String,
    pub threshold: Option<f64>,
    pub client_sizes: Vec<usize>,
    pub kept_counts: Vec<usize>,
    pub unassigned_samples: usize,
    pub initial_perplexity: f64,
    pub per_round_perplexity: Vec<f64>,
    pub final_perplexity: f64,
    pub confusion: ConfusionReport,
    pub per_client: Vec<SelectionReportRow>,
    pub score_distributions: Vec<ClassScoreStats>,
}

pub fn build_report(
    config: &ExperimentConfig,
    artifacts: &RunArtifacts,
    provenance: &BTreeMap<u64, Provenance>,
) -> RunReport {
    RunReport {
        format_version: REPORT_FORMAT_VERSION,
        seed: config.seed,
        config: config.echo(),
        selection_principle: config.selection.principle.as_str().to_string(),
        scoring_method: config.scoring.method.as_str().to_string(),
        threshold: artifacts.threshold,
        client_sizes: artifacts.plan.client_sizes(),
        kept_counts: artifacts.kept.iter().map(|k| k.len()).collect(),
        unassigned_samples: artifacts.plan.unassigned.len(),
        initial_perplexity: artifacts.initial_perplexity,
        per_round_perplexity: artifacts
            .rounds
            .iter()
            .map(|r| r.validation_perplexity)
            .collect(),
        final_perplexity: artifacts.final_perplexity(),
        confusion: ConfusionReport::from(&artifacts.confusion),
        per_client: artifacts.per_client.clone(),
        score_distributions: class_score_stats(&artifacts.scores, provenance),
    }
}

/// One serialized round-log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundLogLine {
    pub round: usize,
    pub participants: Vec<usize>,
    pub weights: Vec<f64>,
    pub validation_perplexity: f64,
    pub kept_total: usize,
    pub dropped_total: usize,
}

pub fn write_round_log(path: &Path, artifacts: &RunArtifacts) -> Result<()> {
    let kept_total = artifacts.kept_total();
    let assigned: usize = artifacts.plan.client_sizes().iter().sum();
    let dropped_total = assigned - kept_total;
    let mut body = String::new();
    for r in &artifacts.rounds {
        let line = RoundLogLine {
            round: r.round,
            participants: r.participants.clone(),
            weights: r.weights.clone(),
            validation_perplexity: r.validation_perplexity,
            kept_total,
            dropped_total,
        };
        body.push_str(&serde_json::to_string(&line).map_err(|e| Error::data(e.to_string()))?);
        body.push('\n');
    }
    atomic_write(path, body.as_bytes())
}

pub fn write_report_json(path: &Path, report: &RunReport) -> Result<()> {
    let mut body = serde_json::to_string_pretty(report).map_err(|e| Error::data(e.to_string()))?;
    body.push('\n');
    atomic_write(path, body.as_bytes())
}

pub fn write_report_csv(path: &Path, artifacts: &RunArtifacts) -> Result<()> {
    let kept_total = artifacts.kept_total();
    let assigned: usize = artifacts.plan.client_sizes().iter().sum();
    let mut body =
        String::from("format_version,round,validation_perplexity,kept_total,dropped_total\n");
    for r in &artifacts.rounds {
        body.push_str(&format!(
            "{REPORT_FORMAT_VERSION},{},{},{},{}\n",
            r.round,
            r.validation_perplexity,
            kept_total,
            assigned - kept_total
        ));
    }
    atomic_write(path, body.as_bytes())
}
