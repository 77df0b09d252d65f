//! The operations behind the CLI subcommands: each one composes pipeline
//! stages and writes the corresponding artifacts under the output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{build_mixture, read_dataset, write_dataset, write_samples, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::{filter_confusion, validation_perplexity, AblationRow, SweepRow};
use crate::experiment::atomic_write;
use crate::experiment::config::{ExperimentConfig, PrincipleKind};
use crate::experiment::pipeline::{
    build_partition, clients_from_plan, prepare_data, pretrain_initial_model, PreparedData,
    RunArtifacts,
};
use crate::experiment::report::{
    build_report, write_report_csv, write_report_json, write_round_log, ConfusionReport, Ratio,
    RunReport, REPORT_FORMAT_VERSION,
};
use crate::model::{load_checkpoint, save_checkpoint, ModelParams};
use crate::scoring::{
    compute_anchor_threshold, read_scores, score_samples, write_scores, ScoreRecord,
};
use crate::selection::{select_by_anchor, select_by_global_quantile, select_by_proportion};

pub struct GenDataOutput {
    pub vocab_path: PathBuf,
    pub dataset_path: PathBuf,
    pub pretrain_path: PathBuf,
    pub validation_path: PathBuf,
    pub anchors_path: PathBuf,
}

/// gen-data: synthesize the corpus and write the vocabulary, the corrupted
/// training pool and the clean public splits.
pub fn cmd_gen_data(config: &ExperimentConfig) -> Result<GenDataOutput> {
    config.validate()?;
    let prep = prepare_data(config)?;
    let out = &config.paths.out_dir;
    let output = GenDataOutput {
        vocab_path: out.join("vocab.txt"),
        dataset_path: out.join("dataset.jsonl"),
        pretrain_path: out.join("pretrain.jsonl"),
        validation_path: out.join("validation.jsonl"),
        anchors_path: out.join("anchors.jsonl"),
    };
    prep.vocab.write_to(&output.vocab_path)?;
    write_dataset(&output.dataset_path, &prep.dataset, &prep.vocab)?;
    write_samples(&output.pretrain_path, &prep.pretrain, &prep.vocab)?;
    write_samples(&output.validation_path, &prep.validation, &prep.vocab)?;
    write_samples(&output.anchors_path, &prep.anchors, &prep.vocab)?;
    atomic_write(&out.join("config.toml"), config.echo().as_bytes())?;
    Ok(output)
}

/// corrupt: apply the configured mixture to an existing clean dataset file.
pub fn cmd_corrupt(
    config: &ExperimentConfig,
    vocab_path: &Path,
    input: &Path,
    output: &Path,
) -> Result<()> {
    let vocab = Vocab::read_from(vocab_path)?;
    let clean = read_dataset(input, &vocab)?;
    let mixed = build_mixture(
        clean.samples,
        &config.mixture_fractions(),
        &config.corruption_options(),
        config.seed,
    )?;
    write_dataset(output, &mixed, &vocab)
}

/// score: score a dataset file against a checkpoint, writing a score dump.
pub fn cmd_score(
    config: &ExperimentConfig,
    vocab_path: &Path,
    dataset_path: &Path,
    checkpoint_path: &Path,
    output: &Path,
) -> Result<usize> {
    let vocab = Vocab::read_from(vocab_path)?;
    let dataset = read_dataset(dataset_path, &vocab)?;
    let params = load_checkpoint(checkpoint_path)?;
    if params.config.vocab_size != vocab.len() {
        return Err(Error::config(format!(
            "checkpoint vocab size {} does not match vocabulary file ({} tokens)",
            params.config.vocab_size,
            vocab.len()
        )));
    }
    // Standalone scoring reuses the configured corpus splits for anchors and
    // validation so results line up with full runs.
    let prep = prepare_data(config)?;
    let scoring = super::pipeline::scoring_config_of(config);
    let records = score_samples(
        &params,
        &dataset.samples,
        &prep.anchors,
        &prep.validation,
        &scoring,
    )?;
    let provenance: BTreeMap<u64, crate::corpus::Provenance> = dataset
        .samples
        .iter()
        .map(|s| (s.id, s.provenance))
        .collect();
    write_scores(output, &records, &provenance)?;
    Ok(records.len())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FilterReport {
    pub format_version: u32,
    pub principle: String,
    pub threshold: Option<f64>,
    pub kept: usize,
    pub dropped: usize,
    pub confusion: ConfusionReport,
}

/// filter: apply the configured selection principle to a score dump.
/// The anchor principle needs the broadcast threshold from a prior run.
pub fn cmd_filter(
    config: &ExperimentConfig,
    scores_path: &Path,
    threshold: Option<f64>,
    kept_output: &Path,
    report_output: &Path,
) -> Result<FilterReport> {
    let dump = read_scores(scores_path)?;
    if dump.is_empty() {
        return Err(Error::data("score dump is empty"));
    }
    let records: Vec<ScoreRecord> = dump
        .iter()
        .map(|d| ScoreRecord {
            sample_id: d.sample_id,
            method: d.method,
            raw: d.raw,
            quality: d.quality,
        })
        .collect();
    let q = config.selection.proportion_q;
    let (kept, used_threshold): (BTreeSet<u64>, Option<f64>) = match config.selection.principle {
        PrincipleKind::None => (records.iter().map(|r| r.sample_id).collect(), None),
        PrincipleKind::Oracle => (
            dump.iter()
                .filter(|d| d.provenance.is_clean())
                .map(|d| d.sample_id)
                .collect(),
            None,
        ),
        PrincipleKind::ByProportion => (select_by_proportion(&records, q)?, None),
        PrincipleKind::GlobalQuantile => {
            let (sets, t) = select_by_global_quantile(std::slice::from_ref(&records), q)?;
            (sets.into_iter().next().unwrap(), Some(t))
        }
        PrincipleKind::Anchor => {
            let t = threshold.ok_or_else(|| {
                Error::config("the anchor principle needs --threshold from a prior run")
            })?;
            (select_by_anchor(&records, t), Some(t))
        }
    };

    let mut kept_body = String::new();
    for id in &kept {
        kept_body.push_str(&id.to_string());
        kept_body.push('\n');
    }
    atomic_write(kept_output, kept_body.as_bytes())?;

    let mut confusion = crate::evaluation::FilterConfusion::empty();
    for d in &dump {
        match (kept.contains(&d.sample_id), d.provenance.is_clean()) {
            (true, true) => confusion.kept_clean += 1,
            (true, false) => confusion.kept_corrupt += 1,
            (false, true) => confusion.dropped_clean += 1,
            (false, false) => confusion.dropped_corrupt += 1,
        }
    }
    let report = FilterReport {
        format_version: REPORT_FORMAT_VERSION,
        principle: config.selection.principle.as_str().to_string(),
        threshold: used_threshold,
        kept: kept.len(),
        dropped: dump.len() - kept.len(),
        confusion: ConfusionReport::from(&confusion),
    };
    let mut body = serde_json::to_string_pretty(&report).map_err(|e| Error::data(e.to_string()))?;
    body.push('\n');
    atomic_write(report_output, body.as_bytes())?;
    Ok(report)
}

pub struct RunOutput {
    pub report: RunReport,
    pub artifacts: RunArtifacts,
    pub report_json: PathBuf,
    pub report_csv: PathBuf,
    pub round_log: PathBuf,
}

/// run: the full two-phase pipeline, writing every artifact under out_dir.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let prep = prepare_data(config)?;
    let initial_model = pretrain_initial_model(config, &prep)?;
    let artifacts = super::pipeline::run_pipeline_from(config, &prep, &initial_model)?;
    write_run_artifacts(config, &prep, &artifacts)
}

pub(crate) fn write_run_artifacts(
    config: &ExperimentConfig,
    prep: &PreparedData,
    artifacts: &RunArtifacts,
) -> Result<RunOutput> {
    let out = &config.paths.out_dir;
    atomic_write(&out.join("config.toml"), config.echo().as_bytes())?;
    prep.vocab.write_to(&out.join("vocab.txt"))?;
    write_dataset(&out.join("dataset.jsonl"), &prep.dataset, &prep.vocab)?;
    write_samples(&out.join("pretrain.jsonl"), &prep.pretrain, &prep.vocab)?;
    write_samples(&out.join("validation.jsonl"), &prep.validation, &prep.vocab)?;
    write_samples(&out.join("anchors.jsonl"), &prep.anchors, &prep.vocab)?;
    save_checkpoint(&artifacts.initial_model, &out.join("theta0.ckpt"))?;
    save_checkpoint(&artifacts.final_model, &out.join("final.ckpt"))?;

    let provenance = prep.provenance_map();
    if artifacts.scores.iter().any(|s| !s.is_empty()) {
        let flat: Vec<ScoreRecord> = {
            let mut all: Vec<ScoreRecord> = artifacts.scores.iter().flatten().copied().collect();
            all.sort_by_key(|r| r.sample_id);
            all
        };
        write_scores(&out.join("scores.jsonl"), &flat, &provenance)?;
    }
    artifacts.trace.write_to(&out.join("trace.jsonl"))?;

    let report = build_report(config, artifacts, &provenance);
    let round_log = out.join("rounds.jsonl");
    let report_json = out.join("report.json");
    let report_csv = out.join("report.csv");
    write_round_log(&round_log, artifacts)?;
    write_report_json(&report_json, &report)?;
    write_report_csv(&report_csv, artifacts)?;
    Ok(RunOutput {
        report,
        artifacts: artifacts.clone(),
        report_json,
        report_csv,
        round_log,
    })
}

/// ablate-selection: per seed, score once under the configured method and
/// compare the three selection principles on kept volume and kept
/// low-quality share.
pub fn cmd_ablate_selection(config: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut seeded = config.clone();
        seeded.seed = seed;
        let prep = prepare_data(&seeded)?;
        let initial_model = pretrain_initial_model(&seeded, &prep)?;
        let plan = build_partition(&seeded, &prep.dataset)?;
        let clients = clients_from_plan(&prep.dataset, &plan)?;
        let scoring = super::pipeline::scoring_config_of(&seeded);

        let per_client: Vec<Vec<ScoreRecord>> = clients
            .iter()
            .map(|c| {
                score_samples(
                    &initial_model,
                    &c.data,
                    &prep.anchors,
                    &prep.validation,
                    &scoring,
                )
            })
            .collect::<Result<_>>()?;
        let threshold =
            compute_anchor_threshold(&initial_model, &prep.anchors, &prep.validation, &scoring)?;
        let q = seeded.selection.proportion_q;

        let by_proportion: Vec<BTreeSet<u64>> = per_client
            .iter()
            .map(|records| select_by_proportion(records, q))
            .collect::<Result<_>>()?;
        let (global_quantile, _) = select_by_global_quantile(&per_client, q)?;
        let anchor: Vec<BTreeSet<u64>> = per_client
            .iter()
            .map(|records| select_by_anchor(records, threshold))
            .collect();

        for (name, kept_sets) in [
            ("by-proportion", &by_proportion),
            ("global-quantile", &global_quantile),
            ("anchor", &anchor),
        ] {
            let mut confusion = crate::evaluation::FilterConfusion::empty();
            for (client, kept) in clients.iter().zip(kept_sets) {
                let ds = crate::corpus::LabeledDataset::from_samples(client.data.clone());
                confusion.merge(&filter_confusion(&ds, kept)?);
            }
            rows.push(AblationRow {
                seed,
                method: seeded.scoring.method,
                principle: name.to_string(),
                kept: confusion.kept(),
                dropped: confusion.total() - confusion.kept(),
                kept_low_quality_proportion: confusion.kept_low_quality_proportion(),
            });
        }
    }
    write_ablation_outputs(config, &rows)?;
    Ok(rows)
}

fn write_ablation_outputs(config: &ExperimentConfig, rows: &[AblationRow]) -> Result<()> {
    let out = &config.paths.out_dir;
    let mut csv = String::from(
        "format_version,seed,method,principle,kept,dropped,kept_low_quality_proportion\n",
    );
    for r in rows {
        csv.push_str(&format!(
            "{REPORT_FORMAT_VERSION},{},{},{},{},{},{}\n",
            r.seed,
            r.method.as_str(),
            r.principle,
            r.kept,
            r.dropped,
            r.kept_low_quality_proportion
                .map(|v| v.to_string())
                .unwrap_or_else(|| "undefined".to_string()),
        ));
    }
    atomic_write(&out.join("ablation.csv"), csv.as_bytes())?;
    let mut body = serde_json::to_string_pretty(rows).map_err(|e| Error::data(e.to_string()))?;
    body.push('\n');
    atomic_write(&out.join("ablation.json"), body.as_bytes())
}

/// sweep: unfiltered federated runs across corruption proportions, one row
/// per (proportion, seed), reusing the pretrained model per seed.
pub fn cmd_sweep(
    config: &ExperimentConfig,
    proportions: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    config.validate()?;
    if proportions.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep needs proportions and seeds"));
    }
    for &p in proportions {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!(
                "sweep proportion {p} outside [0, 1)"
            )));
        }
    }
    let mut rows = Vec::new();
    // The clean pool and the pretrained model depend only on the seed, so
    // they are shared across proportions; re-mixing the clean pool with the
    // same seed reproduces exactly what a direct run at that mixture does.
    let mut cache: BTreeMap<u64, (PreparedData, ModelParams)> = BTreeMap::new();
    for &seed in seeds {
        for &proportion in proportions {
            let mut run_config = config.clone();
            run_config.seed = seed;
            run_config.selection.principle = PrincipleKind::None;
            let scaled = config.mixture_fractions().rescaled(proportion);
            run_config.corpus.mixture.cut = scaled.cut;
            run_config.corpus.mixture.delete = scaled.delete;
            run_config.corpus.mixture.exchange = scaled.exchange;

            let (clean_prep, model) = match cache.entry(seed) {
                std::collections::btree_map::Entry::Occupied(entry) => entry.into_mut(),
                std::collections::btree_map::Entry::Vacant(entry) => {
                    let mut clean_config = run_config.clone();
                    clean_config.corpus.mixture.cut = 0.0;
                    clean_config.corpus.mixture.delete = 0.0;
                    clean_config.corpus.mixture.exchange = 0.0;
                    let prep = prepare_data(&clean_config)?;
                    let model = pretrain_initial_model(&clean_config, &prep)?;
                    entry.insert((prep, model))
                }
            };
            let mut prep = clean_prep.clone();
            prep.dataset = build_mixture(
                clean_prep.dataset.samples.clone(),
                &scaled,
                &run_config.corruption_options(),
                seed,
            )?;
            let artifacts = super::pipeline::run_pipeline_from(&run_config, &prep, model)?;
            rows.push(SweepRow {
                proportion,
                seed,
                final_perplexity: artifacts.final_perplexity(),
                rounds: artifacts.rounds.len(),
            });
        }
    }
    write_sweep_outputs(config, &rows)?;
    Ok(rows)
}

fn write_sweep_outputs(config: &ExperimentConfig, rows: &[SweepRow]) -> Result<()> {
    let out = &config.paths.out_dir;
    let mut csv = String::from("format_version,proportion,seed,rounds,final_perplexity\n");
    for r in rows {
        csv.push_str(&format!(
            "{REPORT_FORMAT_VERSION},{},{},{},{}\n",
            r.proportion, r.seed, r.rounds, r.final_perplexity
        ));
    }
    atomic_write(&out.join("sweep.csv"), csv.as_bytes())?;
    let mut body = serde_json::to_string_pretty(rows).map_err(|e| Error::data(e.to_string()))?;
    body.push('\n');
    atomic_write(&out.join("sweep.json"), body.as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub format_version: u32,
    pub confusion: Option<ConfusionReport>,
    pub kept_low_quality_proportion: Option<Ratio>,
    pub validation_perplexity: Option<f64>,
}

/// evaluate: confusion of a kept-id file against a dataset and/or validation
/// perplexity of a checkpoint.
pub fn cmd_evaluate(
    vocab_path: &Path,
    dataset_path: &Path,
    kept_path: Option<&Path>,
    checkpoint_path: Option<&Path>,
    output: &Path,
) -> Result<EvaluateReport> {
    let vocab = Vocab::read_from(vocab_path)?;
    let dataset = read_dataset(dataset_path, &vocab)?;
    let confusion = match kept_path {
        Some(path) => {
            let body = std::fs::read_to_string(path).map_err(|e| {
                Error::data(format!("cannot read kept file {}: {e}", path.display()))
            })?;
            let kept: BTreeSet<u64> = body
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    l.trim()
                        .parse::<u64>()
                        .map_err(|e| Error::data(format!("bad sample id {l:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            Some(filter_confusion(&dataset, &kept)?)
        }
        None => None,
    };
    let perplexity = match checkpoint_path {
        Some(path) => {
            let params = load_checkpoint(path)?;
            Some(validation_perplexity(&params, &dataset.samples)?)
        }
        None => None,
    };
    let report = EvaluateReport {
        format_version: REPORT_FORMAT_VERSION,
        confusion: confusion.as_ref().map(ConfusionReport::from),
        kept_low_quality_proportion: confusion
            .as_ref()
            .map(|c| Ratio::new(c.kept_corrupt, c.kept())),
        validation_perplexity: perplexity,
    };
    let mut body = serde_json::to_string_pretty(&report).map_err(|e| Error::data(e.to_string()))?;
    body.push('\n');
    atomic_write(output, body.as_bytes())?;
    Ok(report)
}
