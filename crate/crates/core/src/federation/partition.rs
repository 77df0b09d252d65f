//! Client data partitioning: IID dealing plus the two heterogeneous
//! low-quality-share schemes.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme")]
pub enum PartitionScheme {
    Iid,
    Niid1 { beta: f64 },
    Niid2,
}

/// Assignment of sample ids to clients. Lists are disjoint; whatever the
/// scheme could not place while keeping its size constraints lands in
/// `unassigned`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    pub clients: Vec<Vec<u64>>,
    pub unassigned: Vec<u64>,
}

impl PartitionPlan {
    pub fn client_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }
}

/// Shuffles by the stream named "partition" and deals round-robin; client
/// sizes differ by at most one and every sample is assigned.
pub fn partition_iid(
    dataset: &LabeledDataset,
    num_clients: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return Err(Error::config("partitioning needs at least one client"));
    }
    if dataset.len() < num_clients {
        return Err(Error::config(format!(
            "cannot deal {} samples to {num_clients} clients",
            dataset.len()
        )));
    }
    let mut ids: Vec<u64> = dataset.samples.iter().map(|s| s.id).collect();
    ids.shuffle(&mut rng::stream(seed, "partition"));
    let mut clients = vec![Vec::new(); num_clients];
    for (i, id) in ids.into_iter().enumerate() {
        clients[i % num_clients].push(id);
    }
    Ok(PartitionPlan {
        scheme: PartitionScheme::Iid,
        clients,
        unassigned: Vec::new(),
    })
}

/// Symmetric Dirichlet(beta) draw via normalized Gamma(beta, 1) samples from
/// the stream named "dirichlet".
pub fn dirichlet_proportions(num_clients: usize, beta: f64, seed: u64) -> Result<Vec<f64>> {
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::config(format!(
            "Dirichlet concentration must be positive and finite, got {beta}"
        )));
    }
    let mut rng = rng::stream(seed, "dirichlet");
    let gamma = Gamma::new(beta, 1.0)
        .map_err(|e| Error::config(format!("invalid Gamma parameters: {e}")))?;
    let mut draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
    let total: f64 = draws.iter().sum();
    if total <= 0.0 {
        // All-zero draws only happen for extreme underflow; fall back to the
        // uniform vector the distribution concentrates on.
        return Ok(vec![1.0 / num_clients as f64; num_clients]);
    }
    draws.iter_mut().for_each(|x| *x /= total);
    Ok(draws)
}

/// Largest-remainder integer apportionment of `total` across `targets`,
/// honoring per-slot capacities.
fn apportion_with_caps(targets: &[f64], total: usize, caps: &[usize]) -> Vec<usize> {
    let mut alloc: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    for (a, &cap) in alloc.iter_mut().zip(caps) {
        *a = (*a).min(cap);
    }
    let mut remainders: Vec<(f64, usize)> = targets
        .iter()
        .enumerate()
        .map(|(i, t)| (t - t.floor(), i))
        .collect();
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut assigned: usize = alloc.iter().sum();
    // First pass by remainder order, then round-robin for capped overflow.
    for &(_, i) in &remainders {
        if assigned >= total {
            break;
        }
        if alloc[i] < caps[i] {
            alloc[i] += 1;
            assigned += 1;
        }
    }
    while assigned < total {
        let mut progressed = false;
        for i in 0..alloc.len() {
            if assigned >= total {
                break;
            }
            if alloc[i] < caps[i] {
                alloc[i] += 1;
                assigned += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    alloc
}

/// Low-quality shares per client drawn from Dirichlet(beta), every client
/// topped up to equal size (+-1) with clean samples.
pub fn partition_niid1(
    dataset: &LabeledDataset,
    num_clients: usize,
    beta: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return Err(Error::config("partitioning needs at least one client"));
    }
    if dataset.len() < num_clients {
        return Err(Error::config(format!(
            "cannot partition {} samples across {num_clients} clients",
            dataset.len()
        )));
    }
    let total = dataset.len();
    let base = total / num_clients;
    let sizes: Vec<usize> = (0..num_clients)
        .map(|k| base + usize::from(k < total % num_clients))
        .collect();

    let mut corrupt_ids: Vec<u64> = dataset
        .samples
        .iter()
        .filter(|s| !s.is_clean())
        .map(|s| s.id)
        .collect();
    let mut clean_ids: Vec<u64> = dataset
        .samples
        .iter()
        .filter(|s| s.is_clean())
        .map(|s| s.id)
        .collect();

    let proportions = dirichlet_proportions(num_clients, beta, seed)?;
    let corrupt_total = corrupt_ids.len();
    let targets: Vec<f64> = proportions
        .iter()
        .map(|q| q * corrupt_total as f64)
        .collect();
    let corrupt_alloc = apportion_with_caps(&targets, corrupt_total, &sizes);
    if corrupt_alloc.iter().sum::<usize>() != corrupt_total {
        return Err(Error::config(format!(
            "cannot place {corrupt_total} low-quality samples into {num_clients} clients of sizes {sizes:?}"
        )));
    }

    let clean_needed: usize = sizes.iter().zip(&corrupt_alloc).map(|(s, c)| s - c).sum();
    if clean_needed > clean_ids.len() {
        return Err(Error::config(format!(
            "insufficient clean samples to top clients up to equal size: need {clean_needed}, have {} (deficit {})",
            clean_ids.len(),
            clean_needed - clean_ids.len()
        )));
    }

    let mut shuffle_rng = rng::stream(seed, "partition");
    corrupt_ids.shuffle(&mut shuffle_rng);
    clean_ids.shuffle(&mut shuffle_rng);

    let mut clients = Vec::with_capacity(num_clients);
    let mut corrupt_cursor = 0;
    let mut clean_cursor = 0;
    for (k, &size) in sizes.iter().enumerate() {
        let take_corrupt = corrupt_alloc[k];
        let take_clean = size - take_corrupt;
        let mut list: Vec<u64> =
            corrupt_ids[corrupt_cursor..corrupt_cursor + take_corrupt].to_vec();
        list.extend_from_slice(&clean_ids[clean_cursor..clean_cursor + take_clean]);
        corrupt_cursor += take_corrupt;
        clean_cursor += take_clean;
        clients.push(list);
    }
    let unassigned = clean_ids[clean_cursor..].to_vec();
    Ok(PartitionPlan {
        scheme: PartitionScheme::Niid1 { beta },
        clients,
        unassigned,
    })
}

/// Two-group skew: the first half of the clients holds 70% local low-quality
/// data, the second half 90%, all clients the same size. Errors when the
/// dataset's mixture cannot supply the demanded corruption volume.
pub fn partition_niid2(
    dataset: &LabeledDataset,
    num_clients: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if num_clients == 0 || dataset.len() < num_clients {
        return Err(Error::config(format!(
            "cannot partition {} samples across {num_clients} clients",
            dataset.len()
        )));
    }
    partition_niid2_sized(dataset, num_clients, dataset.len() / num_clients, seed)
}

pub fn partition_niid2_sized(
    dataset: &LabeledDataset,
    num_clients: usize,
    client_size: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if num_clients == 0 || !num_clients.is_multiple_of(2) {
        return Err(Error::config(format!(
            "the two-group partition needs an even client count, got {num_clients}"
        )));
    }
    if client_size == 0 {
        return Err(Error::config("client dataset size must be positive"));
    }
    let c70 = (0.7 * client_size as f64).round() as usize;
    let c90 = (0.9 * client_size as f64).round() as usize;
    let half = num_clients / 2;
    let corrupt_needed = half * (c70 + c90);
    let clean_needed = num_clients * client_size - corrupt_needed;

    let mut corrupt_ids: Vec<u64> = dataset
        .samples
        .iter()
        .filter(|s| !s.is_clean())
        .map(|s| s.id)
        .collect();
    let mut clean_ids: Vec<u64> = dataset
        .samples
        .iter()
        .filter(|s| s.is_clean())
        .map(|s| s.id)
        .collect();

    if corrupt_ids.len() < corrupt_needed {
        return Err(Error::config(format!(
            "mixture cannot supply the 70%/90% demand: need {corrupt_needed} low-quality samples \
             for {num_clients} clients of size {client_size}, have {}",
            corrupt_ids.len()
        )));
    }
    if clean_ids.len() < clean_needed {
        return Err(Error::config(format!(
            "mixture cannot supply the clean remainder: need {clean_needed}, have {}",
            clean_ids.len()
        )));
    }

    let mut shuffle_rng = rng::stream(seed, "niid2");
    corrupt_ids.shuffle(&mut shuffle_rng);
    clean_ids.shuffle(&mut shuffle_rng);

    let mut clients = Vec::with_capacity(num_clients);
    let mut corrupt_cursor = 0;
    let mut clean_cursor = 0;
    for k in 0..num_clients {
        let corrupt_take = if k < half { c70 } else { c90 };
        let clean_take = client_size - corrupt_take;
        let mut list: Vec<u64> =
            corrupt_ids[corrupt_cursor..corrupt_cursor + corrupt_take].to_vec();
        list.extend_from_slice(&clean_ids[clean_cursor..clean_cursor + clean_take]);
        corrupt_cursor += corrupt_take;
        clean_cursor += clean_take;
        clients.push(list);
    }
    let mut unassigned: Vec<u64> = corrupt_ids[corrupt_cursor..].to_vec();
    unassigned.extend_from_slice(&clean_ids[clean_cursor..]);
    Ok(PartitionPlan {
        scheme: PartitionScheme::Niid2,
        clients,
        unassigned,
    })
}

/// Largest equal client size the dataset's mixture can supply under the
/// 70%/90% scheme.
pub fn niid2_max_feasible_size(dataset: &LabeledDataset, num_clients: usize) -> usize {
    if num_clients == 0 || !num_clients.is_multiple_of(2) {
        return 0;
    }
    let corrupt = dataset.mixture.corrupt();
    let clean = dataset.mixture.clean;
    let half = num_clients / 2;
    let mut best = 0;
    for size in 1..=dataset.len() / num_clients {
        let c70 = (0.7 * size as f64).round() as usize;
        let c90 = (0.9 * size as f64).round() as usize;
        let corrupt_needed = half * (c70 + c90);
        let clean_needed = num_clients * size - corrupt_needed;
        if corrupt_needed <= corrupt && clean_needed <= clean {
            best = size;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        build_mixture, generate_world, synthesize_samples, CorruptionOptions, MixtureFractions,
        Provenance, Sample, Vocab,
    };
    use std::collections::HashSet;

    fn dataset(count: usize, fractions: MixtureFractions) -> LabeledDataset {
        let world = generate_world(11, 10, 5, 8).unwrap();
        let vocab = Vocab::for_world(&world);
        let samples = synthesize_samples(&world, &vocab, count, 11).unwrap();
        build_mixture(samples, &fractions, &CorruptionOptions::default(), 11).unwrap()
    }

    fn assert_disjoint_cover(plan: &PartitionPlan, total: usize) {
        let mut seen = HashSet::new();
        for list in plan.clients.iter().chain(std::iter::once(&plan.unassigned)) {
            for &id in list {
                assert!(seen.insert(id), "sample {id} assigned twice");
            }
        }
        assert_eq!(seen.len(), total);
    }

    fn corrupt_count(ds: &LabeledDataset, ids: &[u64]) -> usize {
        ids.iter()
            .filter(|id| ds.by_id(**id).unwrap().provenance != Provenance::Clean)
            .count()
    }

    #[test]
    fn iid_deals_evenly() {
        let ds = dataset(16, MixtureFractions::all_clean());
        let plan = partition_iid(&ds, 4, 1).unwrap();
        assert_eq!(plan.client_sizes(), vec![4, 4, 4, 4]);
        assert_disjoint_cover(&plan, 16);
    }

    #[test]
    fn iid_with_more_clients_than_samples_is_an_error() {
        let ds = dataset(3, MixtureFractions::all_clean());
        assert!(partition_iid(&ds, 4, 1).is_err());
    }

    #[test]
    fn iid_remainder_spreads_by_one() {
        let mut ds = dataset(16, MixtureFractions::all_clean());
        ds.samples.push(Sample {
            id: 999,
            question: ds.samples[0].question.clone(),
            answer: ds.samples[0].answer.clone(),
            provenance: Provenance::Clean,
            origin_id: 999,
        });
        let ds = LabeledDataset::from_samples(ds.samples);
        let plan = partition_iid(&ds, 4, 1).unwrap();
        let mut sizes = plan.client_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![4, 4, 4, 5]);
    }

    #[test]
    fn iid_spreads_corruption_hypergeometrically() {
        // Sampling-statistics oracle: over 20 seeds, each client's
        // low-quality fraction stays within binomial confidence bands
        // around the global 40%.
        let ds = dataset(400, MixtureFractions::default_mix());
        let p: f64 = 0.4;
        let per_client = 100.0;
        let tolerance = 4.0 * (p * (1.0 - p) / per_client).sqrt();
        let mut grand_total = 0.0;
        let mut observations = 0;
        for seed in 0..20u64 {
            let plan = partition_iid(&ds, 4, seed).unwrap();
            for ids in &plan.clients {
                let frac = corrupt_count(&ds, ids) as f64 / ids.len() as f64;
                assert!(
                    (frac - p).abs() <= tolerance,
                    "seed {seed}: client fraction {frac} outside band"
                );
                grand_total += frac;
                observations += 1;
            }
        }
        let mean = grand_total / observations as f64;
        assert!(
            (mean - p).abs() < 0.02,
            "grand mean {mean} drifted from {p}"
        );
    }

    #[test]
    fn niid1_single_client_takes_everything() {
        let ds = dataset(40, MixtureFractions::default_mix());
        let plan = partition_niid1(&ds, 1, 1.0, 1).unwrap();
        assert_eq!(plan.clients[0].len(), 40);
        assert!(plan.unassigned.is_empty());
    }

    #[test]
    fn niid1_sizes_equal_and_cover() {
        let ds = dataset(401, MixtureFractions::default_mix());
        let plan = partition_niid1(&ds, 8, 1.0, 3).unwrap();
        let sizes = plan.client_sizes();
        let max = *sizes.iter().max().unwrap();
        let min = *sizes.iter().min().unwrap();
        assert!(max - min <= 1, "sizes {sizes:?}");
        assert_disjoint_cover(&plan, 401);
        // Every corrupted sample lands on a client.
        let placed_corrupt: usize = plan.clients.iter().map(|c| corrupt_count(&ds, c)).sum();
        assert_eq!(placed_corrupt, ds.mixture.corrupt());
    }

    #[test]
    fn niid1_huge_beta_concentrates_on_equal_split() {
        // Large-beta limit: per-client low-quality counts within +-2 of the
        // even split.
        let ds = dataset(400, MixtureFractions::default_mix());
        let plan = partition_niid1(&ds, 8, 1e6, 5).unwrap();
        let expected = ds.mixture.corrupt() as f64 / 8.0;
        for list in &plan.clients {
            let got = corrupt_count(&ds, list) as f64;
            assert!(
                (got - expected).abs() <= 2.0,
                "count {got} far from {expected}"
            );
        }
    }

    #[test]
    fn dirichlet_mean_matches_symmetry() {
        // Moment oracle: over 20 seeds the empirical mean of each coordinate
        // sits near 1/n.
        let n = 8;
        let seeds: Vec<u64> = (0..20).collect();
        let mut sums = vec![0.0; n];
        for &s in &seeds {
            let q = dirichlet_proportions(n, 1.0, s).unwrap();
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (acc, qi) in sums.iter_mut().zip(q) {
                *acc += qi;
            }
        }
        let var = (1.0 / n as f64) * (1.0 - 1.0 / n as f64) / (n as f64 + 1.0);
        let tolerance = 3.0 * (var / seeds.len() as f64).sqrt();
        for acc in sums {
            let mean = acc / seeds.len() as f64;
            assert!(
                (mean - 1.0 / n as f64).abs() <= tolerance,
                "mean {mean} outside 3 standard errors"
            );
        }
    }

    #[test]
    fn niid2_two_clients_of_twenty() {
        // 70%/90% of 20: 14 and 18 low-quality samples.
        let ds = dataset(50, MixtureFractions::scaled_to_total(0.8));
        let plan = partition_niid2_sized(&ds, 2, 20, 1).unwrap();
        assert_eq!(plan.client_sizes(), vec![20, 20]);
        assert_eq!(corrupt_count(&ds, &plan.clients[0]), 14);
        assert_eq!(corrupt_count(&ds, &plan.clients[1]), 18);
        assert_disjoint_cover(&plan, 50);
    }

    #[test]
    fn niid2_infeasible_mixture_is_an_error() {
        let ds = dataset(100, MixtureFractions::scaled_to_total(0.1));
        let err = partition_niid2(&ds, 2, 1).unwrap_err();
        assert!(err.to_string().contains("cannot supply"), "{err}");
    }

    #[test]
    fn niid2_odd_client_count_rejected() {
        let ds = dataset(100, MixtureFractions::scaled_to_total(0.8));
        assert!(partition_niid2(&ds, 3, 1).is_err());
    }

    #[test]
    fn niid2_max_feasible_size_is_feasible_and_maximal() {
        let ds = dataset(400, MixtureFractions::default_mix());
        let size = niid2_max_feasible_size(&ds, 4);
        assert!(size > 0);
        assert!(partition_niid2_sized(&ds, 4, size, 1).is_ok());
        assert!(partition_niid2_sized(&ds, 4, size + 1, 1).is_err());
    }

    #[test]
    fn partitions_are_deterministic() {
        let ds = dataset(200, MixtureFractions::default_mix());
        assert_eq!(
            partition_iid(&ds, 4, 9).unwrap(),
            partition_iid(&ds, 4, 9).unwrap()
        );
        assert_eq!(
            partition_niid1(&ds, 4, 1.0, 9).unwrap(),
            partition_niid1(&ds, 4, 1.0, 9).unwrap()
        );
    }
}
