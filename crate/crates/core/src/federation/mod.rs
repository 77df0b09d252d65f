//! Two-phase federated protocol as a deterministic state machine.
//!
//! Phase I scores every client sample under the initial global model and
//! derives the global threshold from the server's anchor set; phase II
//! trains adapters locally on filtered data and aggregates them with
//! data-size weights. Only adapters, thresholds and (under the
//! global-quantile baseline) scores ever travel; the message trace records
//! every transfer so the locality guarantee is testable.

mod partition;
mod trace;

pub use partition::{
    dirichlet_proportions, niid2_max_feasible_size, partition_iid, partition_niid1,
    partition_niid2, partition_niid2_sized, PartitionPlan, PartitionScheme,
};
pub use trace::{Direction, MessageTrace, PayloadKind, TransferRecord};

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::evaluation::validation_perplexity;
use crate::model::{local_train, AdapterVector, ModelParams};
use crate::rng;
use crate::scoring::{
    compute_anchor_threshold, score_samples, MethodKind, ScoreRecord, ScoringConfig,
};

/// Mechanical federation knobs; scoring and selection configuration ride
/// alongside in the experiment config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of clients selected per round.
    pub participation: f64,
    pub seed: u64,
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.rounds == 0 || self.local_steps == 0 {
            return Err(Error::config(
                "federation needs at least one client, one round and one local step",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config(format!(
                "participation must lie in (0, 1], got {}",
                self.participation
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    /// Local dataset, retained unfiltered for audit.
    pub data: Vec<Sample>,
    /// Kept subset after phase I filtering; `None` until filtering ran
    /// (or was explicitly skipped by the caller seeding it with the full
    /// dataset).
    pub filtered: Option<Vec<Sample>>,
}

impl ClientState {
    pub fn new(client_id: usize, data: Vec<Sample>) -> ClientState {
        ClientState {
            client_id,
            data,
            filtered: None,
        }
    }

    pub fn filtered_len(&self) -> usize {
        self.filtered.as_ref().map_or(0, Vec::len)
    }

    /// A client whose filter dropped everything; excluded from training.
    pub fn is_flagged_empty(&self) -> bool {
        matches!(&self.filtered, Some(kept) if kept.is_empty())
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub model: ModelParams,
    pub validation: Vec<Sample>,
    pub anchors: Vec<Sample>,
    pub threshold: Option<f64>,
    pub round: usize,
}

impl ServerState {
    pub fn new(model: ModelParams, validation: Vec<Sample>, anchors: Vec<Sample>) -> ServerState {
        ServerState {
            model,
            validation,
            anchors,
            threshold: None,
            round: 0,
        }
    }
}

/// Per-round telemetry. `wall_time` is in-memory only; serialized round
/// logs carry none of it so reruns stay byte-identical.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub weights: Vec<f64>,
    pub validation_perplexity: f64,
    pub wall_time: Duration,
}

fn base_bytes(params: &ModelParams) -> usize {
    let c = &params.config;
    (c.vocab_size * c.embed_dim
        + c.context_window * c.embed_dim * c.hidden_dim
        + c.hidden_dim
        + c.hidden_dim * c.vocab_size)
        * std::mem::size_of::<f64>()
}

fn sample_bytes(samples: &[Sample]) -> usize {
    samples
        .iter()
        .map(|s| (s.question.len() + s.answer.len()) * std::mem::size_of::<u32>())
        .sum()
}

/// Records the setup broadcast: frozen base plus initial adapters and the
/// public validation set to every client.
pub fn record_setup_broadcast(
    server: &ServerState,
    clients: &[ClientState],
    trace: &mut MessageTrace,
) {
    for client in clients {
        trace.record(
            Direction::ServerToClient,
            PayloadKind::BaseModel,
            base_bytes(&server.model),
            None,
            Some(client.client_id),
        );
        trace.record(
            Direction::ServerToClient,
            PayloadKind::Adapters,
            server.model.adapter_bytes(),
            None,
            Some(client.client_id),
        );
        trace.record(
            Direction::ServerToClient,
            PayloadKind::PublicValidation,
            sample_bytes(&server.validation),
            None,
            Some(client.client_id),
        );
    }
}

/// Phase I: every client scores its local samples under the scoring model;
/// the server derives the global threshold from its anchors and broadcasts
/// it. No client data or scores cross the client boundary here.
///
/// For influence scoring the server first warms the adapters up on its
/// clean validation split and distributes that model for scoring only.
pub fn phase1_quality_control(
    server: &mut ServerState,
    clients: &[ClientState],
    scoring: &ScoringConfig,
    trace: &mut MessageTrace,
) -> Result<(f64, Vec<Vec<ScoreRecord>>)> {
    if server.anchors.is_empty() {
        return Err(Error::protocol("phase I needs a nonempty anchor set"));
    }
    for client in clients {
        for sample in &client.data {
            if server.anchors.iter().any(|a| a.id == sample.id) {
                return Err(Error::protocol(format!(
                    "anchor sample {} also appears in client {}'s dataset",
                    sample.id, client.client_id
                )));
            }
        }
    }

    let scoring_model = if scoring.method == MethodKind::Influence && scoring.warmup_steps > 0 {
        let batch = server.validation.len().min(32);
        local_train(
            &server.model,
            &server.validation,
            scoring.warmup_steps,
            batch,
            scoring.warmup_lr,
            rng::derive_seed(scoring.seed, "warmup", &[]),
        )?
    } else {
        server.model.clone()
    };

    record_setup_broadcast(server, clients, trace);
    if scoring.method == MethodKind::Influence {
        // The warmed-up scoring adapters go out separately.
        for client in clients {
            trace.record(
                Direction::ServerToClient,
                PayloadKind::Adapters,
                scoring_model.adapter_bytes(),
                None,
                Some(client.client_id),
            );
        }
    }

    let mut per_client = Vec::with_capacity(clients.len());
    for client in clients {
        let records = score_samples(
            &scoring_model,
            &client.data,
            &server.anchors,
            &server.validation,
            scoring,
        )
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("client {}: {msg}", client.client_id)),
            Error::Data(msg) => Error::Data(format!("client {}: {msg}", client.client_id)),
            other => other,
        })?;
        per_client.push(records);
    }

    let threshold =
        compute_anchor_threshold(&scoring_model, &server.anchors, &server.validation, scoring)?;
    server.threshold = Some(threshold);
    for client in clients {
        trace.record(
            Direction::ServerToClient,
            PayloadKind::Threshold,
            std::mem::size_of::<f64>(),
            None,
            Some(client.client_id),
        );
    }
    Ok((threshold, per_client))
}

/// Phase II filtering: keep samples whose quality is at or above the
/// threshold (ties kept), retain the original dataset for audit, flag the
/// client if nothing survives.
pub fn filter_local(
    client: &mut ClientState,
    threshold: f64,
    scores: &[ScoreRecord],
) -> Result<()> {
    let quality: BTreeMap<u64, f64> = scores.iter().map(|r| (r.sample_id, r.quality)).collect();
    let mut kept = Vec::new();
    for sample in &client.data {
        let q = quality.get(&sample.id).ok_or_else(|| {
            Error::protocol(format!(
                "client {} has no score for sample {}",
                client.client_id, sample.id
            ))
        })?;
        if *q >= threshold {
            kept.push(sample.clone());
        }
    }
    client.filtered = Some(kept);
    Ok(())
}

/// Coordinate-wise weighted sum of adapter vectors in the given order.
pub fn aggregate(adapters: &[AdapterVector], weights: &[f64]) -> Result<AdapterVector> {
    if adapters.is_empty() {
        return Err(Error::protocol("nothing to aggregate"));
    }
    if adapters.len() != weights.len() {
        return Err(Error::protocol(format!(
            "{} adapters but {} weights",
            adapters.len(),
            weights.len()
        )));
    }
    let dim = adapters[0].dim();
    if adapters.iter().any(|a| a.dim() != dim) {
        return Err(Error::protocol("adapter dimension mismatch"));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::protocol(format!(
            "invalid aggregation weights {weights:?}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::protocol(format!(
            "aggregation weights sum to {total}, expected 1"
        )));
    }
    let mut out = AdapterVector::zeros(dim);
    for (adapter, &w) in adapters.iter().zip(weights) {
        out.values.axpy(w, &adapter.values, 1.0);
    }
    Ok(out)
}

/// Phase II training loop. Every round the selected clients copy the global
/// adapters, run `local_steps` of minibatch descent on their filtered data,
/// and the server aggregates with data-size-proportional weights in client
/// id order.
pub fn run_federated(
    config: &FlConfig,
    server: &mut ServerState,
    clients: &mut [ClientState],
    trace: &mut MessageTrace,
) -> Result<Vec<RoundRecord>> {
    config.validate()?;
    for client in clients.iter() {
        if client.filtered.is_none() {
            return Err(Error::protocol(format!(
                "client {} entered training without phase I filtering",
                client.client_id
            )));
        }
    }
    let active: Vec<usize> = clients
        .iter()
        .filter(|c| !c.is_flagged_empty())
        .map(|c| c.client_id)
        .collect();
    if active.is_empty() {
        return Err(Error::protocol(
            "every client was flagged empty after filtering; nothing to train on",
        ));
    }

    let per_round =
        ((config.participation * config.num_clients as f64).ceil() as usize).clamp(1, active.len());
    let mut history = Vec::with_capacity(config.rounds);

    for round in 0..config.rounds {
        let start = Instant::now();
        let mut participants = active.clone();
        participants.shuffle(&mut rng::substream(config.seed, "rounds", &[round as u64]));
        participants.truncate(per_round);
        participants.sort_unstable();

        let mut updates = Vec::with_capacity(participants.len());
        let mut sizes = Vec::with_capacity(participants.len());
        for &client_id in &participants {
            let client = &clients[client_id];
            debug_assert_eq!(client.client_id, client_id);
            trace.record(
                Direction::ServerToClient,
                PayloadKind::Adapters,
                server.model.adapter_bytes(),
                Some(round),
                Some(client_id),
            );
            let data = client.filtered.as_ref().expect("checked above");
            let trained = local_train(
                &server.model,
                data,
                config.local_steps,
                config.batch_size,
                config.learning_rate,
                rng::derive_seed(
                    config.seed,
                    "local-train",
                    &[round as u64, client_id as u64],
                ),
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("round {round}, client {client_id}: {msg}"))
                }
                other => other,
            })?;
            trace.record(
                Direction::ClientToServer,
                PayloadKind::Adapters,
                trained.adapter_bytes(),
                Some(round),
                Some(client_id),
            );
            updates.push(trained.adapter_vector());
            sizes.push(data.len() as f64);
        }

        let total: f64 = sizes.iter().sum();
        let weights: Vec<f64> = sizes.iter().map(|s| s / total).collect();
        let merged = aggregate(&updates, &weights)?;
        server.model.set_adapter_vector(&merged)?;
        server.round = round + 1;

        let ppl = validation_perplexity(&server.model, &server.validation)?;
        history.push(RoundRecord {
            round,
            participants,
            weights,
            validation_perplexity: ppl,
            wall_time: start.elapsed(),
        });
    }
    Ok(history)
}

/// Centralized reference: the same per-round schedule as a one-client
/// federated run, without the aggregation machinery.
pub fn centralized_train(
    config: &FlConfig,
    initial: &ModelParams,
    data: &[Sample],
) -> Result<ModelParams> {
    config.validate()?;
    let mut params = initial.clone();
    for round in 0..config.rounds {
        params = local_train(
            &params,
            data,
            config.local_steps,
            config.batch_size,
            config.learning_rate,
            rng::derive_seed(config.seed, "local-train", &[round as u64, 0]),
        )?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn adapters(dim: usize, fill: f64) -> AdapterVector {
        let mut a = AdapterVector::zeros(dim);
        a.values.fill(fill);
        a
    }

    #[test]
    fn aggregate_identical_adapters_is_identity() {
        let a = adapters(6, 0.25);
        let out = aggregate(&[a.clone(), a.clone()], &[0.3, 0.7]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn size_proportional_weights() {
        // Two clients with 3 and 1 samples: weights 0.75 / 0.25.
        let sizes = [3.0, 1.0];
        let total: f64 = sizes.iter().sum();
        let weights: Vec<f64> = sizes.iter().map(|s| s / total).collect();
        assert_eq!(weights, vec![0.75, 0.25]);
        let a = adapters(4, 1.0);
        let b = adapters(4, 2.0);
        let out = aggregate(&[a, b], &weights).unwrap();
        assert!(out.values.iter().all(|&x| (x - 1.25).abs() < 1e-15));
    }

    #[test]
    fn aggregate_rejects_bad_inputs() {
        let a = adapters(4, 1.0);
        let b = adapters(5, 1.0);
        assert!(aggregate(&[a.clone(), b], &[0.5, 0.5]).is_err());
        assert!(aggregate(&[a.clone(), a.clone()], &[0.5, 0.6]).is_err());
        assert!(aggregate(&[a.clone(), a.clone()], &[-0.5, 1.5]).is_err());
        assert!(aggregate(&[a], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn aggregate_is_order_invariant_under_matching_permutation() {
        let parts: Vec<AdapterVector> = (0..4).map(|i| adapters(8, i as f64 * 0.3 - 0.4)).collect();
        let weights = [0.1, 0.2, 0.3, 0.4];
        let forward = aggregate(&parts, &weights).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted_parts: Vec<AdapterVector> = perm.iter().map(|&i| parts[i].clone()).collect();
        let permuted_weights: Vec<f64> = perm.iter().map(|&i| weights[i]).collect();
        let backward = aggregate(&permuted_parts, &permuted_weights).unwrap();
        let diff = (&forward.values - &backward.values).amax();
        assert!(diff <= 1e-12, "permutation changed the reduction by {diff}");
    }

    #[test]
    fn filter_boundaries() {
        let config = ModelConfig {
            vocab_size: 12,
            embed_dim: 4,
            context_window: 3,
            hidden_dim: 6,
            adapter_rank: 2,
            seed: 3,
        };
        let _ = init_params(&config).unwrap();
        let data: Vec<Sample> = (0..4)
            .map(|id| Sample {
                id,
                question: vec![4, 5],
                answer: vec![6],
                provenance: crate::corpus::Provenance::Clean,
                origin_id: id,
            })
            .collect();
        let qualities = [0.1, 0.3, 0.3, 0.9];
        let scores: Vec<ScoreRecord> = data
            .iter()
            .zip(qualities)
            .map(|(s, q)| ScoreRecord {
                sample_id: s.id,
                method: MethodKind::ConProb,
                raw: 1.0 - q,
                quality: q,
            })
            .collect();

        let mut client = ClientState::new(0, data.clone());
        filter_local(&mut client, 0.3, &scores).unwrap();
        // Ties at the threshold are kept.
        assert_eq!(client.filtered_len(), 3);
        assert_eq!(client.data.len(), 4, "original data retained for audit");

        filter_local(&mut client, f64::NEG_INFINITY, &scores).unwrap();
        assert_eq!(client.filtered_len(), 4);

        filter_local(&mut client, f64::INFINITY, &scores).unwrap();
        assert_eq!(client.filtered_len(), 0);
        assert!(client.is_flagged_empty());
    }

    #[test]
    fn all_clients_flagged_empty_is_a_protocol_error() {
        let config = ModelConfig {
            vocab_size: 12,
            embed_dim: 4,
            context_window: 3,
            hidden_dim: 6,
            adapter_rank: 2,
            seed: 3,
        };
        let theta0 = init_params(&config).unwrap();
        let data = vec![Sample {
            id: 0,
            question: vec![4],
            answer: vec![5],
            provenance: crate::corpus::Provenance::Clean,
            origin_id: 0,
        }];
        let mut client = ClientState::new(0, data.clone());
        client.filtered = Some(Vec::new());
        let mut clients = vec![client];
        let mut server = ServerState::new(theta0, data, Vec::new());
        let fl = FlConfig {
            num_clients: 1,
            rounds: 1,
            local_steps: 1,
            batch_size: 1,
            learning_rate: 0.1,
            participation: 1.0,
            seed: 3,
        };
        let mut trace = MessageTrace::new();
        let err = run_federated(&fl, &mut server, &mut clients, &mut trace).unwrap_err();
        assert_eq!(err.exit_code(), 5);
        assert!(err.to_string().contains("flagged"), "{err}");
    }

    #[test]
    fn partial_participation_selects_half_the_clients() {
        let world = crate::corpus::generate_world(3, 6, 3, 8).unwrap();
        let vocab = crate::corpus::Vocab::for_world(&world);
        let all = crate::corpus::synthesize_samples(&world, &vocab, 40, 3).unwrap();
        let config = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 4,
            context_window: 3,
            hidden_dim: 6,
            adapter_rank: 2,
            seed: 3,
        };
        let theta0 = init_params(&config).unwrap();
        let mut clients: Vec<ClientState> = (0..4)
            .map(|k| {
                let data: Vec<Sample> = all[k * 8..(k + 1) * 8].to_vec();
                let mut c = ClientState::new(k, data.clone());
                c.filtered = Some(data);
                c
            })
            .collect();
        let mut server = ServerState::new(theta0, all[32..].to_vec(), Vec::new());
        let fl = FlConfig {
            num_clients: 4,
            rounds: 6,
            local_steps: 1,
            batch_size: 4,
            learning_rate: 0.1,
            participation: 0.5,
            seed: 3,
        };
        let mut trace = MessageTrace::new();
        let history = run_federated(&fl, &mut server, &mut clients, &mut trace).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for record in &history {
            assert_eq!(record.participants.len(), 2);
            assert!((record.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            seen.extend(record.participants.iter().copied());
        }
        assert!(seen.len() > 2, "rotation never reached other clients");
    }

    #[test]
    fn filter_missing_score_is_a_protocol_error() {
        let data = vec![Sample {
            id: 7,
            question: vec![4],
            answer: vec![5],
            provenance: crate::corpus::Provenance::Clean,
            origin_id: 7,
        }];
        let mut client = ClientState::new(0, data);
        let err = filter_local(&mut client, 0.0, &[]).unwrap_err();
        assert_eq!(err.exit_code(), 5);
    }
}
