//! Deterministic minibatch gradient descent: adapter-only fine-tuning and
//! full-parameter base pretraining.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::model::grad::{accumulate_base_grads, sample_output_grad, BaseGrads};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::rng;

/// Batch size used internally by [`pretrain_base`].
const PRETRAIN_BATCH: usize = 32;

/// Epoch-shuffled batch cursor: batches are drawn without replacement within
/// an epoch, reshuffling when the pool is exhausted.
struct BatchSchedule {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSchedule {
    fn new(len: usize, rng: ChaCha8Rng) -> BatchSchedule {
        BatchSchedule {
            order: (0..len).collect(),
            cursor: len, // force a shuffle on first use
            rng,
        }
    }

    fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

/// Runs `steps` minibatch gradient-descent updates on the adapter factors
/// only. Batches come from the stream named "batch" reseeded from `seed`;
/// frozen tensors are untouched, so the result shares its base with the
/// input bit-for-bit.
pub fn local_train(
    params: &ModelParams,
    data: &[Sample],
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<ModelParams> {
    if data.is_empty() {
        return Err(Error::data("local training data must be nonempty"));
    }
    if steps == 0 || batch_size == 0 {
        return Err(Error::config("steps and batch_size must be at least 1"));
    }
    if !lr.is_finite() {
        return Err(Error::config(format!("learning rate {lr} is not finite")));
    }

    let mut out = params.clone();
    let mut schedule = BatchSchedule::new(data.len(), rng::stream(seed, "batch"));

    for step in 0..steps {
        let batch = schedule.next_batch(batch_size);
        let effective = out.effective_output();
        let mut d_effective = DMatrix::zeros(out.config.hidden_dim, out.config.vocab_size);
        let mut loss = 0.0;
        for &ix in &batch {
            let (sample_loss, sample_grad) = sample_output_grad(&out, &effective, &data[ix])?;
            loss += sample_loss;
            d_effective += sample_grad;
        }
        let inv = 1.0 / batch.len() as f64;
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "training diverged at step {step}: loss = {loss}"
            )));
        }
        d_effective *= inv;

        let d_down = &d_effective * out.adapter_up.transpose();
        let d_up = out.adapter_down.transpose() * &d_effective;
        out.adapter_down -= lr * d_down;
        out.adapter_up -= lr * d_up;
    }
    out.check_finite("local training")?;
    Ok(out)
}

/// Trains every base tensor on a clean public corpus, producing the initial
/// global model: base tensors frozen from here on, adapter down-factor left
/// at its small random init, up-factor zero so the adapter is a no-op.
pub fn pretrain_base(
    config: &ModelConfig,
    clean_corpus: &[Sample],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ModelParams> {
    if clean_corpus.is_empty() {
        return Err(Error::data("pretraining corpus must be nonempty"));
    }
    if let Some(bad) = clean_corpus.iter().find(|s| !s.is_clean()) {
        return Err(Error::data(format!(
            "pretraining corpus must be clean, sample {} is {}",
            bad.id,
            bad.provenance.as_str()
        )));
    }
    if epochs == 0 {
        return Err(Error::config("pretrain epochs must be at least 1"));
    }

    let mut params = init_params(config)?;
    let mut schedule = BatchSchedule::new(clean_corpus.len(), rng::stream(seed, "pretrain-batch"));
    let batches_per_epoch = clean_corpus.len().div_ceil(PRETRAIN_BATCH);

    for epoch in 0..epochs {
        for step in 0..batches_per_epoch {
            let batch = schedule.next_batch(PRETRAIN_BATCH);
            // The adapter up-factor stays zero throughout, so the effective
            // output equals the base matrix and adapters receive no updates.
            let effective = params.effective_output();
            let mut grads = BaseGrads::zeros(&params);
            let mut loss = 0.0;
            for &ix in &batch {
                loss += accumulate_base_grads(&params, &effective, &clean_corpus[ix], &mut grads)?;
            }
            let inv = 1.0 / batch.len() as f64;
            loss *= inv;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "pretraining diverged at epoch {epoch} step {step}: loss = {loss}"
                )));
            }
            let rate = lr * inv;
            params.embedding -= rate * &grads.embedding;
            params.input_proj -= rate * &grads.input_proj;
            params.hidden_bias -= rate * &grads.hidden_bias;
            params.base_output -= rate * &grads.base_output;
        }
    }
    params.check_finite("pretraining")?;
    Ok(params)
}
