//! Tiny fixed-window causal language model with a frozen base and trainable
//! low-rank output adapters.
//!
//! Architecture: the last `context_window` token embeddings are concatenated,
//! passed through one affine + tanh hidden layer, then projected to vocabulary
//! logits by `W0 + A*B` where only the factors `A` (hidden x rank) and `B`
//! (rank x vocab) ever receive fine-tuning updates. The shape is deliberately
//! simple enough that every gradient is hand-derivable and exact.

mod checkpoint;
mod forward;
mod grad;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    answer_span, next_token_logprobs, sample_loss, sample_tokens, sequence_logprob, SequenceScore,
};
pub use grad::adapter_grad;
pub use train::{local_train, pretrain_base};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub context_window: usize,
    pub hidden_dim: usize,
    pub adapter_rank: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::config(format!(
                "vocab_size must be at least 5 (4 markers + content), got {}",
                self.vocab_size
            )));
        }
        if self.embed_dim == 0 || self.context_window == 0 || self.hidden_dim == 0 {
            return Err(Error::config(
                "embed_dim, context_window and hidden_dim must be positive",
            ));
        }
        if self.adapter_rank == 0 || self.adapter_rank > self.hidden_dim.min(self.vocab_size) {
            return Err(Error::config(format!(
                "adapter_rank must lie in 1..=min(hidden_dim, vocab_size), got {}",
                self.adapter_rank
            )));
        }
        Ok(())
    }

    /// A then B, flattened.
    pub fn adapter_dim(&self) -> usize {
        self.hidden_dim * self.adapter_rank + self.adapter_rank * self.vocab_size
    }
}

/// Model parameters. The base tensors (`embedding`, `input_proj`,
/// `hidden_bias`, `base_output`) are frozen by construction: no fine-tuning
/// code path ever writes them, only [`pretrain_base`] does while building the
/// initial model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// vocab_size x embed_dim
    pub embedding: DMatrix<f64>,
    /// (context_window * embed_dim) x hidden_dim
    pub input_proj: DMatrix<f64>,
    /// hidden_dim
    pub hidden_bias: DVector<f64>,
    /// hidden_dim x vocab_size
    pub base_output: DMatrix<f64>,
    /// A: hidden_dim x adapter_rank
    pub adapter_down: DMatrix<f64>,
    /// B: adapter_rank x vocab_size
    pub adapter_up: DMatrix<f64>,
}

/// Flattened adapter parameters: A in row-major order, then B.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterVector {
    pub values: DVector<f64>,
}

impl AdapterVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn zeros(dim: usize) -> AdapterVector {
        AdapterVector {
            values: DVector::zeros(dim),
        }
    }
}

/// Base weights drawn from the stream named "init" at scale 1/sqrt(fan_in);
/// `B = 0` so the adapter starts as an exact no-op.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, "init");
    let v = config.vocab_size;
    let d = config.embed_dim;
    let k = config.context_window;
    let h = config.hidden_dim;
    let r = config.adapter_rank;

    // Tensors are filled one after another in row-major element order.
    let mut gauss = |rows: usize, cols: usize, scale: f64| -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        m
    };

    let embedding = gauss(v, d, 1.0 / (d as f64).sqrt());
    let input_proj = gauss(k * d, h, 1.0 / ((k * d) as f64).sqrt());
    let base_output = gauss(h, v, 1.0 / (h as f64).sqrt());
    let adapter_down = gauss(h, r, 1.0 / (h as f64).sqrt());

    Ok(ModelParams {
        config: *config,
        embedding,
        input_proj,
        hidden_bias: DVector::zeros(h),
        base_output,
        adapter_down,
        adapter_up: DMatrix::zeros(r, v),
    })
}

impl ModelParams {
    /// `W0 + A*B`, the matrix actually applied to hidden activations.
    pub fn effective_output(&self) -> DMatrix<f64> {
        &self.base_output + &self.adapter_down * &self.adapter_up
    }

    pub fn adapter_dim(&self) -> usize {
        self.config.adapter_dim()
    }

    pub fn adapter_vector(&self) -> AdapterVector {
        let h = self.config.hidden_dim;
        let r = self.config.adapter_rank;
        let v = self.config.vocab_size;
        let mut values = DVector::zeros(self.adapter_dim());
        let mut ix = 0;
        for i in 0..h {
            for j in 0..r {
                values[ix] = self.adapter_down[(i, j)];
                ix += 1;
            }
        }
        for i in 0..r {
            for j in 0..v {
                values[ix] = self.adapter_up[(i, j)];
                ix += 1;
            }
        }
        AdapterVector { values }
    }

    pub fn set_adapter_vector(&mut self, adapters: &AdapterVector) -> Result<()> {
        if adapters.dim() != self.adapter_dim() {
            return Err(Error::protocol(format!(
                "adapter vector dimension {} does not match model's {}",
                adapters.dim(),
                self.adapter_dim()
            )));
        }
        let h = self.config.hidden_dim;
        let r = self.config.adapter_rank;
        let v = self.config.vocab_size;
        let mut ix = 0;
        for i in 0..h {
            for j in 0..r {
                self.adapter_down[(i, j)] = adapters.values[ix];
                ix += 1;
            }
        }
        for i in 0..r {
            for j in 0..v {
                self.adapter_up[(i, j)] = adapters.values[ix];
                ix += 1;
            }
        }
        Ok(())
    }

    /// Bytes in one adapter payload, for message-trace accounting.
    pub fn adapter_bytes(&self) -> usize {
        self.adapter_dim() * std::mem::size_of::<f64>()
    }

    pub(crate) fn check_finite(&self, what: &str) -> Result<()> {
        let all_finite = self.embedding.iter().all(|x| x.is_finite())
            && self.input_proj.iter().all(|x| x.is_finite())
            && self.hidden_bias.iter().all(|x| x.is_finite())
            && self.base_output.iter().all(|x| x.is_finite())
            && self.adapter_down.iter().all(|x| x.is_finite())
            && self.adapter_up.iter().all(|x| x.is_finite());
        if all_finite {
            Ok(())
        } else {
            Err(Error::numeric(format!(
                "non-finite parameters after {what}"
            )))
        }
    }
}
