//! Exact forward pass: log-probabilities, sequence scores and sample loss.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::corpus::{Sample, TokenId, ANSWER_START, END_OF_SEQUENCE, PAD, QUESTION_START};
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// `[<q>] Q [<a>] A [<eos>]`: the full token rendering of a sample.
pub fn sample_tokens(sample: &Sample) -> Vec<TokenId> {
    let mut tokens = Vec::with_capacity(sample.question.len() + sample.answer.len() + 3);
    tokens.push(QUESTION_START);
    tokens.extend_from_slice(&sample.question);
    tokens.push(ANSWER_START);
    tokens.extend_from_slice(&sample.answer);
    tokens.push(END_OF_SEQUENCE);
    tokens
}

/// Positions of the answer tokens plus the end marker within
/// [`sample_tokens`]; the span the training loss scores.
pub fn answer_span(sample: &Sample) -> Range<usize> {
    let start = sample.question.len() + 2;
    start..start + sample.answer.len() + 1
}

pub(crate) fn check_tokens(params: &ModelParams, tokens: &[TokenId]) -> Result<()> {
    let v = params.config.vocab_size as TokenId;
    for &t in tokens {
        if t >= v {
            return Err(Error::data(format!(
                "token id {t} out of range for vocab size {v}"
            )));
        }
    }
    Ok(())
}

/// Last `context_window` tokens, left-padded with the pad marker.
pub(crate) fn context_window(params: &ModelParams, context: &[TokenId]) -> Vec<TokenId> {
    let k = params.config.context_window;
    let mut window = vec![PAD; k];
    let take = context.len().min(k);
    window[k - take..].copy_from_slice(&context[context.len() - take..]);
    window
}

/// One forward evaluation with cached intermediates for backprop.
pub(crate) struct Activation {
    pub window: Vec<TokenId>,
    /// Concatenated window embeddings, length k*d.
    pub input: DVector<f64>,
    /// tanh hidden activations, length h.
    pub hidden: DVector<f64>,
    /// Log-softmax over the vocabulary.
    pub logprobs: DVector<f64>,
}

/// Forward through `W0 + A*B` supplied as a precomputed matrix so callers
/// scoring many positions share it.
pub(crate) fn forward_window(
    params: &ModelParams,
    effective: &DMatrix<f64>,
    context: &[TokenId],
) -> Activation {
    let k = params.config.context_window;
    let d = params.config.embed_dim;
    let window = context_window(params, context);

    let mut input = DVector::zeros(k * d);
    for (slot, &tok) in window.iter().enumerate() {
        for j in 0..d {
            input[slot * d + j] = params.embedding[(tok as usize, j)];
        }
    }

    let mut hidden = params.input_proj.tr_mul(&input) + &params.hidden_bias;
    hidden.apply(|z| *z = z.tanh());

    let logits = effective.tr_mul(&hidden);
    let max = logits.max();
    let log_norm = max + logits.iter().map(|u| (u - max).exp()).sum::<f64>().ln();
    let logprobs = logits.map(|u| u - log_norm);

    Activation {
        window,
        input,
        hidden,
        logprobs,
    }
}

/// Log-probability vector over the next token given a context.
pub fn next_token_logprobs(params: &ModelParams, context: &[TokenId]) -> Result<DVector<f64>> {
    if context.is_empty() {
        return Err(Error::data("next-token context must be nonempty"));
    }
    check_tokens(params, context)?;
    let effective = params.effective_output();
    Ok(forward_window(params, &effective, context).logprobs)
}

#[derive(Debug, Clone)]
pub struct SequenceScore {
    /// Length-normalized log-probability: mean of `per_token`.
    pub mean: f64,
    pub per_token: Vec<f64>,
}

/// Scores `tokens[i]` given its predecessors for every `i` in `span`;
/// positions outside the span serve as context only. Position 0 has no
/// predecessor and cannot be scored.
pub fn sequence_logprob(
    params: &ModelParams,
    tokens: &[TokenId],
    span: Range<usize>,
) -> Result<SequenceScore> {
    if span.is_empty() {
        return Err(Error::data("scored span must be nonempty"));
    }
    if span.start == 0 || span.end > tokens.len() {
        return Err(Error::data(format!(
            "scored span {span:?} out of bounds for {} tokens (position 0 has no context)",
            tokens.len()
        )));
    }
    check_tokens(params, tokens)?;
    let effective = params.effective_output();
    let per_token: Vec<f64> = span
        .clone()
        .map(|i| {
            let act = forward_window(params, &effective, &tokens[..i]);
            act.logprobs[tokens[i] as usize]
        })
        .collect();
    let mean = per_token.iter().sum::<f64>() / per_token.len() as f64;
    Ok(SequenceScore { mean, per_token })
}

/// Negative mean log-likelihood of the answer tokens plus the end marker,
/// conditioned on the question prefix. Question tokens are context only.
pub fn sample_loss(params: &ModelParams, sample: &Sample) -> Result<f64> {
    let tokens = sample_tokens(sample);
    let score = sequence_logprob(params, &tokens, answer_span(sample))?;
    Ok(-score.mean)
}
