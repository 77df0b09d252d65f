//! End-to-end pipeline orchestration: data preparation, base pretraining,
//! phase I scoring and filtering, phase II federated training.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use crate::corpus::{
    build_mixture, generate_world, synthesize_samples, LabeledDataset, Provenance, Sample, Vocab,
    World,
};
use crate::error::{Error, Result};
use crate::evaluation::{filter_confusion, validation_perplexity, FilterConfusion};
use crate::experiment::config::{ExperimentConfig, PartitionKind, PrincipleKind};
use crate::federation::{
    niid2_max_feasible_size, partition_iid, partition_niid1, partition_niid2_sized,
    phase1_quality_control, record_setup_broadcast, run_federated, ClientState, Direction,
    FlConfig, MessageTrace, PartitionPlan, PayloadKind, RoundRecord, ServerState,
};
use crate::model::{pretrain_base, ModelParams};
use crate::rng;
use crate::scoring::{ScoreRecord, ScoringConfig};
use crate::selection::{
    select_by_anchor, select_by_global_quantile, select_by_proportion, SelectionReportRow,
};

/// Deterministic corpus material for one experiment: disjoint clean public
/// splits plus the corrupted client training pool.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub world: World,
    pub vocab: Vocab,
    pub pretrain: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub anchors: Vec<Sample>,
    pub dataset: LabeledDataset,
}

impl PreparedData {
    pub fn provenance_map(&self) -> BTreeMap<u64, Provenance> {
        self.dataset
            .samples
            .iter()
            .map(|s| (s.id, s.provenance))
            .collect()
    }
}

/// Synthesizes the full corpus and slices it into pretrain / validation /
/// anchor / training pools before corrupting the training pool.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let c = &config.corpus;
    let world = generate_world(config.seed, c.entities, c.attributes, c.values)?;
    let vocab = Vocab::for_world(&world);
    let total = c.pretrain_samples + c.validation_samples + c.anchor_samples + c.train_samples;
    let all = synthesize_samples(&world, &vocab, total, config.seed)?;

    let mut cursor = 0;
    let mut take = |n: usize| {
        let slice = all[cursor..cursor + n].to_vec();
        cursor += n;
        slice
    };
    let pretrain = take(c.pretrain_samples);
    let validation = take(c.validation_samples);
    let anchors = take(c.anchor_samples);
    let train_pool = take(c.train_samples);

    let dataset = build_mixture(
        train_pool,
        &config.mixture_fractions(),
        &config.corruption_options(),
        config.seed,
    )?;
    Ok(PreparedData {
        world,
        vocab,
        pretrain,
        validation,
        anchors,
        dataset,
    })
}

/// The initial global model: base pretrained on the clean public corpus,
/// adapters reset to a no-op.
pub fn pretrain_initial_model(
    config: &ExperimentConfig,
    prep: &PreparedData,
) -> Result<ModelParams> {
    let model_config = config.model_config(prep.vocab.len());
    pretrain_base(
        &model_config,
        &prep.pretrain,
        config.model.pretrain_epochs,
        config.model.pretrain_lr,
        rng::derive_seed(config.seed, "pretrain", &[]),
    )
}

/// Partition per the configured scheme. The two-group scheme auto-shrinks
/// the client size to the largest the mixture can supply unless the config
/// pins one explicitly.
pub fn build_partition(
    config: &ExperimentConfig,
    dataset: &LabeledDataset,
) -> Result<PartitionPlan> {
    let n = config.federation.clients;
    let seed = rng::derive_seed(config.seed, "partition-plan", &[]);
    match config.federation.partition {
        PartitionKind::Iid => partition_iid(dataset, n, seed),
        PartitionKind::Niid1 => partition_niid1(dataset, n, config.federation.dirichlet_beta, seed),
        PartitionKind::Niid2 => {
            let size = match config.federation.niid2_client_size {
                Some(size) => size,
                None => {
                    let size = niid2_max_feasible_size(dataset, n);
                    if size == 0 {
                        return Err(Error::config(format!(
                            "the mixture ({} low-quality of {}) cannot supply any equal-size \
                             70%/90% split across {n} clients",
                            dataset.mixture.corrupt(),
                            dataset.len()
                        )));
                    }
                    size
                }
            };
            partition_niid2_sized(dataset, n, size, seed)
        }
    }
}

pub fn clients_from_plan(
    dataset: &LabeledDataset,
    plan: &PartitionPlan,
) -> Result<Vec<ClientState>> {
    let by_id: BTreeMap<u64, &Sample> = dataset.samples.iter().map(|s| (s.id, s)).collect();
    plan.clients
        .iter()
        .enumerate()
        .map(|(k, ids)| {
            let data: Vec<Sample> =
                ids.iter()
                    .map(|id| {
                        by_id.get(id).map(|s| (*s).clone()).ok_or_else(|| {
                            Error::data(format!("plan references unknown sample {id}"))
                        })
                    })
                    .collect::<Result<_>>()?;
            Ok(ClientState::new(k, data))
        })
        .collect()
}

pub(crate) fn scoring_config_of(config: &ExperimentConfig) -> ScoringConfig {
    ScoringConfig {
        method: config.scoring.method,
        influence: crate::scoring::InfluenceConfig {
            damping: config.scoring.influence_damping,
            backend: config.scoring.influence_backend,
        },
        warmup_steps: config.scoring.warmup_steps,
        warmup_lr: config.scoring.warmup_lr,
        icl_demonstrations: config.scoring.icl_demonstrations,
        icl_max_prompt_tokens: config.scoring.icl_max_prompt_tokens,
        seed: config.seed,
    }
}

fn fl_config(config: &ExperimentConfig) -> FlConfig {
    FlConfig {
        num_clients: config.federation.clients,
        rounds: config.federation.rounds,
        local_steps: config.federation.local_steps,
        batch_size: config.federation.batch_size,
        learning_rate: config.federation.learning_rate,
        participation: config.federation.participation,
        seed: config.seed,
    }
}

/// Everything a full two-phase run produces, before any file is written.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub initial_model: ModelParams,
    pub final_model: ModelParams,
    pub initial_perplexity: f64,
    pub rounds: Vec<RoundRecord>,
    /// Per-client phase I score records; empty for the unscored baselines.
    pub scores: Vec<Vec<ScoreRecord>>,
    pub threshold: Option<f64>,
    pub plan: PartitionPlan,
    pub kept: Vec<BTreeSet<u64>>,
    pub confusion: FilterConfusion,
    pub per_client: Vec<SelectionReportRow>,
    pub trace: MessageTrace,
}

impl RunArtifacts {
    pub fn final_perplexity(&self) -> f64 {
        self.rounds
            .last()
            .map(|r| r.validation_perplexity)
            .unwrap_or(self.initial_perplexity)
    }

    pub fn kept_total(&self) -> usize {
        self.kept.iter().map(BTreeSet::len).sum()
    }
}

/// Per-client score records, per-client kept id sets, and the broadcast
/// threshold where the principle defines one.
type SelectionOutcome = (Vec<Vec<ScoreRecord>>, Vec<BTreeSet<u64>>, Option<f64>);

/// Applies the configured selection principle, filling every client's
/// filtered dataset.
fn apply_selection(
    config: &ExperimentConfig,
    server: &mut ServerState,
    clients: &mut [ClientState],
    trace: &mut MessageTrace,
) -> Result<SelectionOutcome> {
    let principle = config.selection.principle;
    match principle {
        PrincipleKind::None | PrincipleKind::Oracle => {
            record_setup_broadcast(server, clients, trace);
            let mut kept_sets = Vec::with_capacity(clients.len());
            for client in clients.iter_mut() {
                let kept: Vec<Sample> = match principle {
                    PrincipleKind::None => client.data.clone(),
                    _ => client
                        .data
                        .iter()
                        .filter(|s| s.is_clean())
                        .cloned()
                        .collect(),
                };
                kept_sets.push(kept.iter().map(|s| s.id).collect());
                client.filtered = Some(kept);
            }
            Ok((vec![Vec::new(); clients.len()], kept_sets, None))
        }
        PrincipleKind::Anchor => {
            let scoring = scoring_config_of(config);
            let (threshold, scores) = phase1_quality_control(server, clients, &scoring, trace)?;
            let mut kept_sets = Vec::with_capacity(clients.len());
            for (client, records) in clients.iter_mut().zip(&scores) {
                crate::federation::filter_local(client, threshold, records)?;
                kept_sets.push(select_by_anchor(records, threshold));
            }
            Ok((scores, kept_sets, Some(threshold)))
        }
        PrincipleKind::ByProportion => {
            let scoring = scoring_config_of(config);
            let (_, scores) = phase1_quality_control(server, clients, &scoring, trace)?;
            let q = config.selection.proportion_q;
            let mut kept_sets = Vec::with_capacity(clients.len());
            for (client, records) in clients.iter_mut().zip(&scores) {
                let kept = select_by_proportion(records, q)?;
                client.filtered = Some(
                    client
                        .data
                        .iter()
                        .filter(|s| kept.contains(&s.id))
                        .cloned()
                        .collect(),
                );
                kept_sets.push(kept);
            }
            Ok((scores, kept_sets, None))
        }
        PrincipleKind::GlobalQuantile => {
            let scoring = scoring_config_of(config);
            let (_, scores) = phase1_quality_control(server, clients, &scoring, trace)?;
            // The pooled threshold requires every client to upload its scores.
            for (client, records) in clients.iter().zip(&scores) {
                trace.record(
                    Direction::ClientToServer,
                    PayloadKind::ScoreUpload,
                    records.len() * 2 * std::mem::size_of::<f64>(),
                    None,
                    Some(client.client_id),
                );
            }
            let (kept_sets, threshold) =
                select_by_global_quantile(&scores, config.selection.proportion_q)?;
            for client in clients.iter() {
                trace.record(
                    Direction::ServerToClient,
                    PayloadKind::Threshold,
                    std::mem::size_of::<f64>(),
                    None,
                    Some(client.client_id),
                );
            }
            for (client, kept) in clients.iter_mut().zip(&kept_sets) {
                client.filtered = Some(
                    client
                        .data
                        .iter()
                        .filter(|s| kept.contains(&s.id))
                        .cloned()
                        .collect(),
                );
            }
            Ok((scores, kept_sets, Some(threshold)))
        }
    }
}

fn selection_rows(clients: &[ClientState], kept: &[BTreeSet<u64>]) -> Vec<SelectionReportRow> {
    clients
        .iter()
        .zip(kept)
        .map(|(client, kept_ids)| {
            let kept_corrupt = client
                .data
                .iter()
                .filter(|s| kept_ids.contains(&s.id) && !s.is_clean())
                .count();
            SelectionReportRow {
                client_id: client.client_id,
                kept: kept_ids.len(),
                dropped: client.data.len() - kept_ids.len(),
                kept_low_quality_proportion: if kept_ids.is_empty() {
                    None
                } else {
                    Some(kept_corrupt as f64 / kept_ids.len() as f64)
                },
            }
        })
        .collect()
}

/// The full two-phase pipeline from prepared data and a pretrained initial
/// model. Splitting preparation out lets callers share the expensive
/// pretraining across runs that differ only downstream.
pub fn run_pipeline_from(
    config: &ExperimentConfig,
    prep: &PreparedData,
    initial_model: &ModelParams,
) -> Result<RunArtifacts> {
    let plan = build_partition(config, &prep.dataset)?;
    let mut clients = clients_from_plan(&prep.dataset, &plan)?;
    let mut server = ServerState::new(
        initial_model.clone(),
        prep.validation.clone(),
        prep.anchors.clone(),
    );
    let mut trace = MessageTrace::new();

    let (scores, kept, threshold) = apply_selection(config, &mut server, &mut clients, &mut trace)?;

    // Confusion is measured against the assigned pool, client by client.
    let mut confusion = FilterConfusion::empty();
    for (client, kept_ids) in clients.iter().zip(&kept) {
        let client_ds = LabeledDataset::from_samples(client.data.clone());
        confusion.merge(&filter_confusion(&client_ds, kept_ids)?);
    }
    let per_client = selection_rows(&clients, &kept);

    let initial_perplexity = validation_perplexity(initial_model, &prep.validation)?;
    let rounds = run_federated(&fl_config(config), &mut server, &mut clients, &mut trace)?;

    Ok(RunArtifacts {
        initial_model: initial_model.clone(),
        final_model: server.model,
        initial_perplexity,
        rounds,
        scores,
        threshold,
        plan,
        kept,
        confusion,
        per_client,
        trace,
    })
}

/// Prepare, pretrain and run in one call.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let prep = prepare_data(config)?;
    let initial_model = pretrain_initial_model(config, &prep)?;
    run_pipeline_from(config, &prep, &initial_model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::default_config();
        config.corpus.entities = 10;
        config.corpus.attributes = 5;
        config.corpus.values = 12;
        config.corpus.train_samples = 120;
        config.corpus.pretrain_samples = 80;
        config.corpus.validation_samples = 30;
        config.model.pretrain_epochs = 3;
        config.federation.clients = 3;
        config.federation.rounds = 2;
        config.federation.local_steps = 2;
        config.federation.batch_size = 8;
        config
    }

    #[test]
    fn prepared_splits_are_disjoint_and_sized() {
        let config = small_config();
        let prep = prepare_data(&config).unwrap();
        assert_eq!(prep.pretrain.len(), 80);
        assert_eq!(prep.validation.len(), 30);
        assert_eq!(prep.anchors.len(), 10);
        assert_eq!(prep.dataset.len(), 120);
        let mut ids = BTreeSet::new();
        for s in prep
            .pretrain
            .iter()
            .chain(&prep.validation)
            .chain(&prep.anchors)
            .chain(&prep.dataset.samples)
        {
            assert!(ids.insert(s.id), "id {} reused across splits", s.id);
        }
        assert!(prep.pretrain.iter().all(Sample::is_clean));
        assert!(prep.anchors.iter().all(Sample::is_clean));
        // Default mixture: 40% of the training pool is corrupted.
        assert_eq!(prep.dataset.mixture.corrupt(), 48);
    }

    #[test]
    fn pipeline_none_baseline_keeps_everything() {
        let mut config = small_config();
        config.selection.principle = PrincipleKind::None;
        let artifacts = run_pipeline(&config).unwrap();
        assert_eq!(artifacts.kept_total(), 120);
        assert_eq!(artifacts.rounds.len(), 2);
        assert_eq!(artifacts.trace.client_sample_uploads(), 0);
        assert_eq!(artifacts.trace.client_score_uploads(), 0);
        assert!(artifacts.threshold.is_none());
    }

    #[test]
    fn pipeline_oracle_keeps_exactly_the_clean_part() {
        let mut config = small_config();
        config.selection.principle = PrincipleKind::Oracle;
        let artifacts = run_pipeline(&config).unwrap();
        assert_eq!(artifacts.confusion.kept_corrupt, 0);
        assert_eq!(artifacts.confusion.dropped_clean, 0);
        assert_eq!(artifacts.confusion.kept_clean, 72);
    }

    #[test]
    fn pipeline_auto_sizes_the_two_group_partition() {
        // A 40% mixture cannot give every client 70-90% local corruption at
        // full size; the pipeline shrinks clients to the feasible maximum.
        let mut config = small_config();
        config.federation.clients = 2;
        config.federation.partition = crate::experiment::config::PartitionKind::Niid2;
        config.selection.principle = PrincipleKind::None;
        let prep = prepare_data(&config).unwrap();
        let theta0 = pretrain_initial_model(&config, &prep).unwrap();
        let artifacts = run_pipeline_from(&config, &prep, &theta0).unwrap();

        let sizes = artifacts.plan.client_sizes();
        assert_eq!(sizes[0], sizes[1]);
        assert!(sizes[0] > 0);
        assert!(!artifacts.plan.unassigned.is_empty());
        let corrupt_count = |ids: &[u64]| {
            ids.iter()
                .filter(|id| !prep.dataset.by_id(**id).unwrap().is_clean())
                .count() as f64
        };
        let size = sizes[0] as f64;
        assert!((corrupt_count(&artifacts.plan.clients[0]) - 0.7 * size).abs() <= 1.0);
        assert!((corrupt_count(&artifacts.plan.clients[1]) - 0.9 * size).abs() <= 1.0);
        assert_eq!(artifacts.rounds.len(), 2);
    }

    #[test]
    fn pipeline_anchor_run_emits_no_client_payloads() {
        let mut config = small_config();
        config.selection.principle = PrincipleKind::Anchor;
        let artifacts = run_pipeline(&config).unwrap();
        assert_eq!(artifacts.trace.client_sample_uploads(), 0);
        assert_eq!(artifacts.trace.client_score_uploads(), 0);
        assert!(artifacts.threshold.is_some());
        let score_total: usize = artifacts.scores.iter().map(Vec::len).sum();
        assert_eq!(score_total, 120, "every sample is scored exactly once");
    }

    #[test]
    fn pipeline_global_quantile_uploads_scores_not_samples() {
        let mut config = small_config();
        config.selection.principle = PrincipleKind::GlobalQuantile;
        let artifacts = run_pipeline(&config).unwrap();
        assert_eq!(artifacts.trace.client_score_uploads(), 3);
        assert_eq!(artifacts.trace.client_sample_uploads(), 0);
    }

    #[test]
    fn pipeline_supports_influence_scoring_with_warmup() {
        let mut config = small_config();
        config.selection.principle = PrincipleKind::Anchor;
        config.scoring.method = crate::scoring::MethodKind::Influence;
        config.scoring.warmup_steps = 5;
        let artifacts = run_pipeline(&config).unwrap();
        assert!(artifacts.threshold.is_some());
        assert_eq!(artifacts.trace.client_score_uploads(), 0);
        // The warmed-up scoring adapters went out on top of the setup
        // broadcast: two adapter transfers per client before round 0.
        let setup_adapters = artifacts
            .trace
            .records
            .iter()
            .filter(|r| {
                r.round.is_none()
                    && r.payload == crate::federation::PayloadKind::Adapters
                    && r.direction == crate::federation::Direction::ServerToClient
            })
            .count();
        assert_eq!(setup_adapters, 2 * config.federation.clients);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let mut config = small_config();
        config.selection.principle = PrincipleKind::Anchor;
        let a = run_pipeline(&config).unwrap();
        let b = run_pipeline(&config).unwrap();
        assert_eq!(a.final_model, b.final_model);
        assert_eq!(a.threshold, b.threshold);
        assert_eq!(a.kept, b.kept);
        let ppl_a: Vec<f64> = a.rounds.iter().map(|r| r.validation_perplexity).collect();
        let ppl_b: Vec<f64> = b.rounds.iter().map(|r| r.validation_perplexity).collect();
        assert_eq!(ppl_a, ppl_b);
        for record in &a.rounds {
            let total: f64 = record.weights.iter().sum();
            assert!((total - 1.0).abs() <= 1e-12, "round weights sum to {total}");
            assert!(record.weights.iter().all(|w| *w >= 0.0));
        }
    }
}
