//! Exact analytical gradients of the sample loss.
//!
//! For a scored position with hidden activation `a`, logits `u = W^T a`
//! (`W = W0 + A*B`) and target `y`, the logit gradient of the negative
//! log-likelihood is `softmax(u) - onehot(y)`. Everything else is the chain
//! rule through the tanh layer and the embedding concatenation.

use nalgebra::{DMatrix, DVector};

use crate::corpus::Sample;
use crate::error::Result;
use crate::model::forward::{answer_span, forward_window, sample_tokens};
use crate::model::{AdapterVector, ModelParams};

/// Loss and its gradient with respect to the effective output matrix
/// `W = W0 + A*B`, from which both adapter and base gradients follow.
pub(crate) fn sample_output_grad(
    params: &ModelParams,
    effective: &DMatrix<f64>,
    sample: &Sample,
) -> Result<(f64, DMatrix<f64>)> {
    let tokens = sample_tokens(sample);
    crate::model::forward::check_tokens(params, &tokens)?;
    let span = answer_span(sample);
    let scale = 1.0 / span.len() as f64;

    let h = params.config.hidden_dim;
    let v = params.config.vocab_size;
    let mut d_effective = DMatrix::zeros(h, v);
    let mut loss = 0.0;
    for i in span {
        let act = forward_window(params, effective, &tokens[..i]);
        let target = tokens[i] as usize;
        loss -= scale * act.logprobs[target];
        let mut d_logits = act.logprobs.map(f64::exp);
        d_logits[target] -= 1.0;
        d_effective.ger(scale, &act.hidden, &d_logits, 1.0);
    }
    Ok((loss, d_effective))
}

/// Exact per-sample gradient of [`crate::model::sample_loss`] with respect
/// to the adapter factors only; frozen tensors get no gradient.
pub fn adapter_grad(params: &ModelParams, sample: &Sample) -> Result<AdapterVector> {
    let effective = params.effective_output();
    let (_, d_effective) = sample_output_grad(params, &effective, sample)?;
    Ok(adapter_grad_from_output(params, &d_effective))
}

/// dA = dW * B^T, dB = A^T * dW, flattened A-then-B row-major.
pub(crate) fn adapter_grad_from_output(
    params: &ModelParams,
    d_effective: &DMatrix<f64>,
) -> AdapterVector {
    let d_down = d_effective * params.adapter_up.transpose();
    let d_up = params.adapter_down.transpose() * d_effective;
    let h = params.config.hidden_dim;
    let r = params.config.adapter_rank;
    let v = params.config.vocab_size;
    let mut values = DVector::zeros(params.adapter_dim());
    let mut ix = 0;
    for i in 0..h {
        for j in 0..r {
            values[ix] = d_down[(i, j)];
            ix += 1;
        }
    }
    for i in 0..r {
        for j in 0..v {
            values[ix] = d_up[(i, j)];
            ix += 1;
        }
    }
    AdapterVector { values }
}

/// Gradients for every base tensor, used only while building the initial
/// model; fine-tuning never touches these.
pub(crate) struct BaseGrads {
    pub embedding: DMatrix<f64>,
    pub input_proj: DMatrix<f64>,
    pub hidden_bias: DVector<f64>,
    pub base_output: DMatrix<f64>,
}

impl BaseGrads {
    pub fn zeros(params: &ModelParams) -> BaseGrads {
        let c = &params.config;
        BaseGrads {
            embedding: DMatrix::zeros(c.vocab_size, c.embed_dim),
            input_proj: DMatrix::zeros(c.context_window * c.embed_dim, c.hidden_dim),
            hidden_bias: DVector::zeros(c.hidden_dim),
            base_output: DMatrix::zeros(c.hidden_dim, c.vocab_size),
        }
    }
}

/// Accumulates one sample's full backward pass into `grads`; returns the
/// sample loss.
pub(crate) fn accumulate_base_grads(
    params: &ModelParams,
    effective: &DMatrix<f64>,
    sample: &Sample,
    grads: &mut BaseGrads,
) -> Result<f64> {
    let tokens = sample_tokens(sample);
    crate::model::forward::check_tokens(params, &tokens)?;
    let span = answer_span(sample);
    let scale = 1.0 / span.len() as f64;
    let d = params.config.embed_dim;

    let mut loss = 0.0;
    for i in span {
        let act = forward_window(params, effective, &tokens[..i]);
        let target = tokens[i] as usize;
        loss -= scale * act.logprobs[target];

        let mut d_logits = act.logprobs.map(f64::exp);
        d_logits[target] -= 1.0;
        d_logits *= scale;

        grads.base_output.ger(1.0, &act.hidden, &d_logits, 1.0);

        let d_hidden = effective * &d_logits;
        let d_pre: DVector<f64> = d_hidden.zip_map(&act.hidden, |g, a| g * (1.0 - a * a));

        grads.hidden_bias += &d_pre;
        grads.input_proj.ger(1.0, &act.input, &d_pre, 1.0);

        let d_input = &params.input_proj * &d_pre;
        for (slot, &tok) in act.window.iter().enumerate() {
            for j in 0..d {
                grads.embedding[(tok as usize, j)] += d_input[slot * d + j];
            }
        }
    }
    Ok(loss)
}
