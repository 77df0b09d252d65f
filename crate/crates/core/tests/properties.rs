//! Property tests for the module invariants that hold over whole input
//! families rather than single examples.

use proptest::prelude::*;

use fedqc::corpus::*;
use fedqc::federation::aggregate;
use fedqc::model::{init_params, AdapterVector, ModelConfig};
use fedqc::scoring::{MethodKind, ScoreRecord};
use fedqc::selection::{select_by_anchor, select_by_proportion};

fn records_from(qualities: &[f64]) -> Vec<ScoreRecord> {
    qualities
        .iter()
        .enumerate()
        .map(|(i, &q)| ScoreRecord {
            sample_id: i as u64,
            method: MethodKind::ConProb,
            raw: -q,
            quality: q,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Corruption never touches questions or ids, and the class subsets
    /// partition the dataset.
    #[test]
    fn mixture_partitions_and_preserves_questions(
        seed in 0u64..500,
        count in 20usize..120,
        cut in 0.0f64..0.3,
        delete in 0.0f64..0.3,
        exchange in 0.0f64..0.3,
    ) {
        let world = generate_world(seed, 6, 4, 8).unwrap();
        let vocab = Vocab::for_world(&world);
        let samples = synthesize_samples(&world, &vocab, count, seed).unwrap();
        let fractions = MixtureFractions { cut, delete, exchange };
        let ds = build_mixture(samples.clone(), &fractions, &CorruptionOptions::default(), seed);
        // Exchange pools of exactly one sample are a legal failure.
        prop_assume!(ds.is_ok());
        let ds = ds.unwrap();
        prop_assert_eq!(ds.len(), count);
        let mut by_class = [0usize; 4];
        for (orig, got) in samples.iter().zip(&ds.samples) {
            prop_assert_eq!(orig.id, got.id);
            prop_assert_eq!(&orig.question, &got.question);
            by_class[got.provenance as usize] += 1;
            // Exchange answers provably mismatch the world's fact.
            if got.provenance == Provenance::Exchange {
                prop_assert!(!answer_matches_world(&world, &vocab, got));
                prop_assert_ne!(got.origin_id, got.id);
            }
            if got.provenance == Provenance::Clean {
                prop_assert!(answer_matches_world(&world, &vocab, got));
            }
        }
        prop_assert_eq!(by_class.iter().sum::<usize>(), count);
        // Realized counts match the request within one sample per class.
        let expect = [
            cut * count as f64,
            delete * count as f64,
            exchange * count as f64,
        ];
        let got = [ds.mixture.cut, ds.mixture.delete, ds.mixture.exchange];
        for (g, e) in got.iter().zip(expect) {
            prop_assert!((*g as f64 - e).abs() <= 1.0);
        }
        // Byte-identical on regeneration.
        let again = build_mixture(samples, &fractions, &CorruptionOptions::default(), seed).unwrap();
        prop_assert_eq!(ds.samples, again.samples);
    }

    /// Adapter flatten/unflatten round-trips exactly.
    #[test]
    fn adapter_vector_round_trip(seed in 0u64..1000, fill in -2.0f64..2.0) {
        let config = ModelConfig {
            vocab_size: 11,
            embed_dim: 3,
            context_window: 2,
            hidden_dim: 5,
            adapter_rank: 2,
            seed,
        };
        let mut params = init_params(&config).unwrap();
        params.adapter_up.iter_mut().for_each(|x| *x = fill);
        let flat = params.adapter_vector();
        let mut other = init_params(&config).unwrap();
        other.set_adapter_vector(&flat).unwrap();
        prop_assert_eq!(other.adapter_down, params.adapter_down);
        prop_assert_eq!(other.adapter_up, params.adapter_up);
    }

    /// Aggregation is invariant under matching permutations of clients and
    /// weights, to 1e-12.
    #[test]
    fn aggregation_permutation_invariance(
        seed in 0u64..1000,
        dims in 2usize..30,
        parts in 2usize..6,
    ) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = fedqc::rng::stream(seed, "prop-aggregate");
        let adapters: Vec<AdapterVector> = (0..parts)
            .map(|_| {
                let mut a = AdapterVector::zeros(dims);
                a.values.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
                a
            })
            .collect();
        let mut weights: Vec<f64> = (0..parts).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        // Exact unit sum by nudging the largest weight.
        let drift: f64 = 1.0 - weights.iter().sum::<f64>();
        weights[0] += drift;

        let forward = aggregate(&adapters, &weights).unwrap();
        let mut perm: Vec<usize> = (0..parts).collect();
        perm.shuffle(&mut rng);
        let permuted_adapters: Vec<AdapterVector> =
            perm.iter().map(|&i| adapters[i].clone()).collect();
        let permuted_weights: Vec<f64> = perm.iter().map(|&i| weights[i]).collect();
        let backward = aggregate(&permuted_adapters, &permuted_weights).unwrap();
        prop_assert!((forward.values - backward.values).amax() <= 1e-12);
    }

    /// Raising one sample's quality never evicts it from a kept set while
    /// everything else stays fixed.
    #[test]
    fn selection_is_monotone(
        qualities in prop::collection::vec(-5.0f64..5.0, 3..40),
        bump_ix in any::<prop::sample::Index>(),
        bump in 0.0f64..3.0,
        q in 0.0f64..0.99,
        tau in -5.0f64..5.0,
    ) {
        let records = records_from(&qualities);
        let ix = bump_ix.index(records.len());
        let mut bumped = records.clone();
        bumped[ix].quality += bump;

        let kept_before = select_by_proportion(&records, q).unwrap();
        let kept_after = select_by_proportion(&bumped, q).unwrap();
        if kept_before.contains(&(ix as u64)) {
            prop_assert!(kept_after.contains(&(ix as u64)));
        }

        let anchor_before = select_by_anchor(&records, tau);
        let anchor_after = select_by_anchor(&bumped, tau);
        if anchor_before.contains(&(ix as u64)) {
            prop_assert!(anchor_after.contains(&(ix as u64)));
        }
        // ByProportion keeps exactly n - floor(q*n) samples.
        let expected = qualities.len() - (q * qualities.len() as f64).floor() as usize;
        prop_assert_eq!(kept_before.len(), expected);
    }

    /// Checkpoints round-trip byte-exactly for arbitrary shapes.
    #[test]
    fn checkpoint_round_trip(
        seed in 0u64..500,
        v in 6usize..40,
        d in 1usize..6,
        k in 1usize..5,
        h in 2usize..10,
    ) {
        let config = ModelConfig {
            vocab_size: v,
            embed_dim: d,
            context_window: k,
            hidden_dim: h,
            adapter_rank: 1 + seed as usize % h.min(v),
            seed,
        };
        let params = init_params(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        fedqc::model::save_checkpoint(&params, &path).unwrap();
        let loaded = fedqc::model::load_checkpoint(&path).unwrap();
        prop_assert_eq!(loaded, params);
    }
}
