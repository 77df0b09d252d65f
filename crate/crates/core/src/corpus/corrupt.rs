//! The three low-quality corruption patterns and the mixture builder.
//!
//! Cut truncates an answer's tail, delete removes interior tokens, exchange
//! swaps whole answers between pairs so the answer no longer matches the
//! question. All three preserve the question and the sample id.

use rand::seq::SliceRandom;

use crate::corpus::{LabeledDataset, Provenance, Sample};
use crate::error::{Error, Result};
use crate::rng;

/// Answer-truncation limit for cut corruption.
///
/// The template answers here are short, so the default halves the answer;
/// a fixed token budget is available for long-answer corpora.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum CutLimit {
    /// limit = ceil(answer_length / 2)
    #[default]
    HalfAnswer,
    /// Literal token budget.
    Fixed(usize),
}

impl CutLimit {
    pub fn for_answer(self, answer_len: usize) -> usize {
        match self {
            CutLimit::HalfAnswer => answer_len.div_ceil(2),
            CutLimit::Fixed(limit) => limit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionOptions {
    pub cut_limit: CutLimit,
    /// Fraction of answer tokens removed by delete corruption.
    pub delete_fraction: f64,
}

impl Default for CorruptionOptions {
    fn default() -> Self {
        CorruptionOptions {
            cut_limit: CutLimit::HalfAnswer,
            delete_fraction: 0.4,
        }
    }
}

/// Requested corruption shares over the dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureFractions {
    pub cut: f64,
    pub delete: f64,
    pub exchange: f64,
}

impl MixtureFractions {
    /// 10% cut, 15% delete, 15% exchange: 40% low-quality in total.
    pub fn default_mix() -> MixtureFractions {
        MixtureFractions {
            cut: 0.10,
            delete: 0.15,
            exchange: 0.15,
        }
    }

    pub fn all_clean() -> MixtureFractions {
        MixtureFractions {
            cut: 0.0,
            delete: 0.0,
            exchange: 0.0,
        }
    }

    /// Rescales the mixture so the total corrupted share becomes `total`,
    /// keeping the relative class split.
    pub fn scaled_to_total(total: f64) -> MixtureFractions {
        MixtureFractions::default_mix().rescaled(total)
    }

    /// This mixture's class split rescaled to a new corrupted total; a
    /// degenerate all-zero mixture falls back to the default split.
    pub fn rescaled(&self, total: f64) -> MixtureFractions {
        let base = if self.total() > 0.0 {
            *self
        } else {
            MixtureFractions::default_mix()
        };
        let base_total = base.total();
        MixtureFractions {
            cut: total * base.cut / base_total,
            delete: total * base.delete / base_total,
            exchange: total * base.exchange / base_total,
        }
    }

    pub fn total(&self) -> f64 {
        self.cut + self.delete + self.exchange
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("cut", self.cut),
            ("delete", self.delete),
            ("exchange", self.exchange),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!(
                    "mixture fraction {name} = {f} outside [0, 1]"
                )));
            }
        }
        if self.total() > 1.0 + 1e-12 {
            return Err(Error::config(format!(
                "mixture fractions sum to {} > 1",
                self.total()
            )));
        }
        Ok(())
    }
}

/// Truncates the answer to its first `limit` tokens.
///
/// Errors if the sample is not clean or the limit would not strictly shorten
/// the answer; callers building a cut pool treat that as ineligibility.
pub fn corrupt_cut(sample: &Sample, limit: usize) -> Result<Sample> {
    require_clean(sample, "cut")?;
    if limit == 0 {
        return Err(Error::data("cut limit of 0 would empty the answer"));
    }
    if limit >= sample.answer.len() {
        return Err(Error::data(format!(
            "cut limit {limit} does not strictly shorten a {}-token answer",
            sample.answer.len()
        )));
    }
    let mut out = sample.clone();
    out.answer.truncate(limit);
    out.provenance = Provenance::Cut;
    Ok(out)
}

/// Removes `ceil(fraction * len)` answer tokens chosen without replacement
/// by the stream named "delete"; survivors keep their relative order.
pub fn corrupt_delete(sample: &Sample, fraction: f64, seed: u64) -> Result<Sample> {
    require_clean(sample, "delete")?;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!(
            "delete fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let len = sample.answer.len();
    let remove = (fraction * len as f64).ceil() as usize;
    if remove >= len {
        return Err(Error::data(format!(
            "deleting {remove} of {len} answer tokens would leave nothing"
        )));
    }
    let mut rng = rng::stream(seed, "delete");
    let mut doomed = rand::seq::index::sample(&mut rng, len, remove).into_vec();
    doomed.sort_unstable();
    let mut out = sample.clone();
    let mut next_doomed = doomed.iter().peekable();
    out.answer = sample
        .answer
        .iter()
        .enumerate()
        .filter_map(|(i, tok)| {
            if next_doomed.peek() == Some(&&i) {
                next_doomed.next();
                None
            } else {
                Some(*tok)
            }
        })
        .collect();
    out.provenance = Provenance::Delete;
    Ok(out)
}

/// Permutes answers by a derangement drawn from the stream named "exchange":
/// no sample keeps its own answer, `origin_id` records the donor.
///
/// The derangement is taken over answer content, not just indices, so that
/// duplicate question-answer pairs in the pool cannot silently swap
/// identical answers; every exchanged sample genuinely mismatches.
pub fn corrupt_exchange(samples: &[Sample], seed: u64) -> Result<Vec<Sample>> {
    if samples.len() < 2 {
        return Err(Error::data(format!(
            "exchange needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    for s in samples {
        require_clean(s, "exchange")?;
    }
    let mut rng = rng::stream(seed, "exchange");
    let n = samples.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut attempts = 0;
    loop {
        perm.shuffle(&mut rng);
        if perm
            .iter()
            .enumerate()
            .all(|(i, &p)| samples[p].answer != samples[i].answer)
        {
            break;
        }
        attempts += 1;
        if attempts >= 10_000 {
            return Err(Error::data(
                "exchange cannot give every sample a different answer: \
                 too many duplicate answers in the pool",
            ));
        }
    }
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let donor = &samples[perm[i]];
            Sample {
                id: s.id,
                question: s.question.clone(),
                answer: donor.answer.clone(),
                provenance: Provenance::Exchange,
                origin_id: donor.id,
            }
        })
        .collect())
}

fn require_clean(sample: &Sample, op: &str) -> Result<()> {
    if sample.provenance != Provenance::Clean {
        return Err(Error::data(format!(
            "{op} corruption requires a clean sample, got {} (id {})",
            sample.provenance.as_str(),
            sample.id
        )));
    }
    Ok(())
}

/// Largest-remainder apportionment of per-class corruption counts.
///
/// The total corrupted count is the nearest integer to the summed targets;
/// per-class floors are topped up by descending fractional remainder, ties
/// broken in class order (cut, delete, exchange).
fn class_counts(n: usize, fractions: &MixtureFractions) -> [usize; 3] {
    let targets = [
        fractions.cut * n as f64,
        fractions.delete * n as f64,
        fractions.exchange * n as f64,
    ];
    let total = (targets.iter().sum::<f64>() + 0.5).floor() as usize;
    let mut counts = [0usize; 3];
    let mut remainders = [(0.0f64, 0usize); 3];
    for (i, t) in targets.iter().enumerate() {
        counts[i] = t.floor() as usize;
        remainders[i] = (t - t.floor(), i);
    }
    let mut leftover = total.saturating_sub(counts.iter().sum::<usize>());
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, class) in &remainders {
        if leftover == 0 {
            break;
        }
        counts[class] += 1;
        leftover -= 1;
    }
    counts
}

/// Corrupts disjoint subsets of a clean sample list per the requested
/// fractions; the rest stays clean. Subsets are chosen by the stream named
/// "mixture"; samples whose answers a corruption cannot legally alter are
/// skipped in favor of eligible ones.
pub fn build_mixture(
    samples: Vec<Sample>,
    fractions: &MixtureFractions,
    options: &CorruptionOptions,
    seed: u64,
) -> Result<LabeledDataset> {
    fractions.validate()?;
    for s in &samples {
        require_clean(s, "mixture")?;
    }
    let n = samples.len();
    let [want_cut, want_delete, want_exchange] = class_counts(n, fractions);
    if want_cut + want_delete + want_exchange > n {
        return Err(Error::config(format!(
            "mixture demands {} corrupted samples from {n}",
            want_cut + want_delete + want_exchange
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "mixture"));

    let cut_ok = |s: &Sample| options.cut_limit.for_answer(s.answer.len()) < s.answer.len();
    let delete_ok = |s: &Sample| {
        let len = s.answer.len();
        ((options.delete_fraction * len as f64).ceil() as usize) < len
    };

    let mut pools: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut taken = vec![false; n];
    let wants = [want_cut, want_delete, want_exchange];
    for (class, &want) in wants.iter().enumerate() {
        for &ix in &order {
            if pools[class].len() == want {
                break;
            }
            if taken[ix] {
                continue;
            }
            let eligible = match class {
                0 => cut_ok(&samples[ix]),
                1 => delete_ok(&samples[ix]),
                _ => true,
            };
            if eligible {
                taken[ix] = true;
                pools[class].push(ix);
            }
        }
        if pools[class].len() < want {
            let name = ["cut", "delete", "exchange"][class];
            return Err(Error::data(format!(
                "mixture cannot fill the {name} pool: wanted {want}, only {} eligible",
                pools[class].len()
            )));
        }
    }

    let mut out = samples;
    for &ix in &pools[0] {
        let limit = options.cut_limit.for_answer(out[ix].answer.len());
        out[ix] = corrupt_cut(&out[ix], limit)?;
    }
    for &ix in &pools[1] {
        let sample_seed = rng::derive_seed(seed, "delete", &[out[ix].id]);
        out[ix] = corrupt_delete(&out[ix], options.delete_fraction, sample_seed)?;
    }
    if !pools[2].is_empty() {
        let pool: Vec<Sample> = pools[2].iter().map(|&ix| out[ix].clone()).collect();
        let exchanged = corrupt_exchange(&pool, rng::derive_seed(seed, "exchange", &[]))?;
        for (&ix, swapped) in pools[2].iter().zip(exchanged) {
            out[ix] = swapped;
        }
    }

    Ok(LabeledDataset::from_samples(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_world, synthesize_samples, Vocab};

    fn clean_samples(count: usize) -> Vec<Sample> {
        let world = generate_world(7, 10, 5, 8).unwrap();
        let vocab = Vocab::for_world(&world);
        synthesize_samples(&world, &vocab, count, 7).unwrap()
    }

    #[test]
    fn cut_keeps_prefix() {
        let samples = clean_samples(1);
        let cut = corrupt_cut(&samples[0], 3).unwrap();
        assert_eq!(cut.answer, samples[0].answer[..3]);
        assert_eq!(cut.provenance, Provenance::Cut);
        assert_eq!(cut.question, samples[0].question);
        assert_eq!(cut.origin_id, cut.id);
    }

    #[test]
    fn cut_long_answer_at_the_hundred_token_budget() {
        let mut samples = clean_samples(1);
        // Stretch the answer to 150 tokens by repeating its body.
        while samples[0].answer.len() < 150 {
            let tok = samples[0].answer[samples[0].answer.len() % 7];
            samples[0].answer.push(tok);
        }
        samples[0].answer.truncate(150);
        let cut = corrupt_cut(&samples[0], 100).unwrap();
        assert_eq!(cut.answer.len(), 100);
        assert_eq!(cut.answer, samples[0].answer[..100]);
    }

    #[test]
    fn cut_without_strict_shortening_is_rejected() {
        let samples = clean_samples(1);
        assert!(corrupt_cut(&samples[0], 100).is_err());
        assert!(corrupt_cut(&samples[0], samples[0].answer.len()).is_err());
    }

    #[test]
    fn delete_keeps_relative_order() {
        let samples = clean_samples(1);
        // 7-token template answer, fraction 0.4 -> ceil(2.8) = 3 removed.
        let deleted = corrupt_delete(&samples[0], 0.4, 11).unwrap();
        assert_eq!(deleted.answer.len(), 4);
        let mut cursor = samples[0].answer.iter();
        for tok in &deleted.answer {
            assert!(cursor.any(|t| t == tok), "survivor order changed");
        }
    }

    #[test]
    fn delete_ten_tokens_at_forty_percent_leaves_six() {
        let mut samples = clean_samples(1);
        while samples[0].answer.len() < 10 {
            let tok = samples[0].answer[samples[0].answer.len() % 7];
            samples[0].answer.push(tok);
        }
        samples[0].answer.truncate(10);
        let deleted = corrupt_delete(&samples[0], 0.4, 3).unwrap();
        assert_eq!(deleted.answer.len(), 6);
    }

    #[test]
    fn delete_that_empties_is_an_error() {
        let mut samples = clean_samples(1);
        samples[0].answer.truncate(2);
        assert!(corrupt_delete(&samples[0], 0.99, 11).is_err());
    }

    #[test]
    fn delete_is_deterministic() {
        let samples = clean_samples(1);
        let a = corrupt_delete(&samples[0], 0.4, 11).unwrap();
        let b = corrupt_delete(&samples[0], 0.4, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exchange_of_two_swaps() {
        let samples = clean_samples(2);
        let out = corrupt_exchange(&samples, 5).unwrap();
        assert_eq!(out[0].answer, samples[1].answer);
        assert_eq!(out[1].answer, samples[0].answer);
        assert_eq!(out[0].origin_id, samples[1].id);
    }

    #[test]
    fn exchange_has_no_fixed_point() {
        // Fixed-point scan over a 5-sample pool.
        let samples = clean_samples(5);
        let out = corrupt_exchange(&samples, 5).unwrap();
        for (orig, swapped) in samples.iter().zip(&out) {
            assert_ne!(swapped.origin_id, orig.id);
            assert_eq!(swapped.question, orig.question);
        }
    }

    #[test]
    fn exchange_of_one_is_an_error() {
        let samples = clean_samples(1);
        assert!(corrupt_exchange(&samples, 5).is_err());
    }

    #[test]
    fn mixture_default_fractions_exact_counts() {
        let samples = clean_samples(2000);
        let ds = build_mixture(
            samples,
            &MixtureFractions::default_mix(),
            &CorruptionOptions::default(),
            7,
        )
        .unwrap();
        assert_eq!(ds.mixture.cut, 200);
        assert_eq!(ds.mixture.delete, 300);
        assert_eq!(ds.mixture.exchange, 300);
        assert_eq!(ds.mixture.clean, 1200);
    }

    #[test]
    fn mixture_default_fractions_at_full_corpus_scale() {
        // 16000 samples at 10/15/15: 1600 cut + 2400 delete + 2400 exchange.
        let world = generate_world(7, 30, 10, 40).unwrap();
        let vocab = Vocab::for_world(&world);
        let samples = synthesize_samples(&world, &vocab, 16_000, 7).unwrap();
        let ds = build_mixture(
            samples,
            &MixtureFractions::default_mix(),
            &CorruptionOptions::default(),
            7,
        )
        .unwrap();
        assert_eq!(ds.mixture.cut, 1600);
        assert_eq!(ds.mixture.delete, 2400);
        assert_eq!(ds.mixture.exchange, 2400);
        assert_eq!(ds.mixture.clean, 9600);
    }

    #[test]
    fn mixture_largest_remainder_rounding() {
        // 100 samples at 0.333 each: floors 33+33+33, one leftover goes to
        // the first class in tie order.
        let samples = clean_samples(100);
        let fr = MixtureFractions {
            cut: 0.333,
            delete: 0.333,
            exchange: 0.333,
        };
        let ds = build_mixture(samples, &fr, &CorruptionOptions::default(), 7).unwrap();
        assert_eq!(
            (ds.mixture.cut, ds.mixture.delete, ds.mixture.exchange),
            (34, 33, 33)
        );
    }

    #[test]
    fn mixture_all_zero_keeps_everything_clean() {
        let samples = clean_samples(50);
        let ds = build_mixture(
            samples.clone(),
            &MixtureFractions::all_clean(),
            &CorruptionOptions::default(),
            7,
        )
        .unwrap();
        assert_eq!(ds.samples, samples);
    }

    #[test]
    fn mixture_fractions_over_one_rejected() {
        let samples = clean_samples(10);
        let fr = MixtureFractions {
            cut: 0.5,
            delete: 0.4,
            exchange: 0.3,
        };
        assert!(matches!(
            build_mixture(samples, &fr, &CorruptionOptions::default(), 7),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mixture_partition_is_disjoint_and_questions_survive() {
        let samples = clean_samples(400);
        let ds = build_mixture(
            samples.clone(),
            &MixtureFractions::default_mix(),
            &CorruptionOptions::default(),
            7,
        )
        .unwrap();
        assert_eq!(ds.len(), 400);
        for (orig, got) in samples.iter().zip(&ds.samples) {
            assert_eq!(orig.id, got.id);
            assert_eq!(
                orig.question, got.question,
                "corruption must not touch questions"
            );
        }
        assert_eq!(ds.mixture.total(), 400);
    }

    #[test]
    fn fixed_cut_limit_longer_than_answers_cannot_fill_pool() {
        let samples = clean_samples(100);
        let opts = CorruptionOptions {
            cut_limit: CutLimit::Fixed(100),
            delete_fraction: 0.4,
        };
        let err = build_mixture(samples, &MixtureFractions::default_mix(), &opts, 7).unwrap_err();
        assert!(err.to_string().contains("cut"), "{err}");
    }
}
