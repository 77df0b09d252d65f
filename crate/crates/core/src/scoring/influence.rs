//! Gradient-based influence scoring through a damped Gauss-Newton Hessian.
//!
//! For train gradients g_i and the summed validation gradient v, the score
//! is `v^T (H + damping*I)^{-1} g_i` with `H = sum_i g_i g_i^T / n` over the
//! adapter parameters. The exact backend solves the damped system directly
//! (the adapter dimension keeps that cheap); the approximate backend swaps
//! averaging and inversion, applying the rank-one Sherman-Morrison inverse
//! per sample.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::model::{adapter_grad, ModelParams};
use crate::scoring::{MethodKind, ScoreRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfluenceBackend {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfluenceConfig {
    /// Damping added to the Hessian diagonal; `None` picks
    /// `0.1 * trace(H) / dim`.
    pub damping: Option<f64>,
    pub backend: InfluenceBackend,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        InfluenceConfig {
            damping: None,
            backend: InfluenceBackend::Exact,
        }
    }
}

/// Scores every train sample by its gradient alignment with the validation
/// set; quality = raw (higher alignment = better). Output ordered by
/// sample id.
pub fn score_influence(
    params: &ModelParams,
    train: &[Sample],
    validation: &[Sample],
    config: &InfluenceConfig,
) -> Result<Vec<ScoreRecord>> {
    if train.is_empty() || validation.is_empty() {
        return Err(Error::data(
            "influence scoring needs nonempty train and validation sets",
        ));
    }
    let train_grads: Vec<DVector<f64>> = train
        .iter()
        .map(|s| adapter_grad(params, s).map(|g| g.values))
        .collect::<Result<_>>()?;
    let mut val_sum = DVector::zeros(params.adapter_dim());
    for s in validation {
        val_sum += adapter_grad(params, s)?.values;
    }
    let damping = resolve_damping(config, &train_grads);
    let raws = influence_raw(&train_grads, &val_sum, damping, config.backend)?;

    let mut records: Vec<ScoreRecord> = train
        .iter()
        .zip(raws)
        .map(|(s, raw)| {
            if !raw.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite influence score for sample {} (damping {damping})",
                    s.id
                )));
            }
            Ok(ScoreRecord {
                sample_id: s.id,
                method: MethodKind::Influence,
                raw,
                quality: raw,
            })
        })
        .collect::<Result<_>>()?;
    records.sort_by_key(|r| r.sample_id);
    Ok(records)
}

pub(crate) fn resolve_damping(config: &InfluenceConfig, train_grads: &[DVector<f64>]) -> f64 {
    match config.damping {
        Some(d) => d,
        None => {
            let dim = train_grads[0].len() as f64;
            let trace = train_grads.iter().map(|g| g.norm_squared()).sum::<f64>()
                / train_grads.len() as f64;
            (0.1 * trace / dim).max(1e-12)
        }
    }
}

/// Raw influence values per train gradient, in input order.
pub(crate) fn influence_raw(
    train_grads: &[DVector<f64>],
    val_sum: &DVector<f64>,
    damping: f64,
    backend: InfluenceBackend,
) -> Result<Vec<f64>> {
    let n = train_grads.len() as f64;
    let solved = match backend {
        InfluenceBackend::Exact => {
            let dim = val_sum.len();
            let mut hessian = DMatrix::zeros(dim, dim);
            for g in train_grads {
                hessian.ger(1.0 / n, g, g, 1.0);
            }
            for i in 0..dim {
                hessian[(i, i)] += damping;
            }
            let chol = nalgebra::linalg::Cholesky::new(hessian).ok_or_else(|| {
                Error::numeric(format!(
                    "damped Hessian factorization failed despite damping {damping}"
                ))
            })?;
            chol.solve(val_sum)
        }
        InfluenceBackend::Approximate => {
            // Average of per-sample Sherman-Morrison inverses applied to v.
            let mut acc = DVector::zeros(val_sum.len());
            for g in train_grads {
                let coeff = g.dot(val_sum) / (damping + g.norm_squared());
                acc += val_sum - coeff * g;
            }
            acc / (n * damping)
        }
    };
    Ok(train_grads.iter().map(|g| solved.dot(g)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, at: usize, scale: f64) -> DVector<f64> {
        let mut v = DVector::zeros(dim);
        v[at] = scale;
        v
    }

    #[test]
    fn orthogonal_validation_gradient_scores_zero() {
        let train = vec![unit(4, 0, 1.0), unit(4, 1, 2.0)];
        let val = unit(4, 3, 5.0);
        for backend in [InfluenceBackend::Exact, InfluenceBackend::Approximate] {
            let raws = influence_raw(&train, &val, 0.05, backend).unwrap();
            for r in raws {
                assert!(r.abs() < 1e-12, "expected zero alignment, got {r}");
            }
        }
    }

    #[test]
    fn single_sample_matches_sherman_morrison_closed_form() {
        // With one train gradient g, H = g g^T and
        // (g g^T + damping I)^{-1} v = (v - g (g.v)/(damping + |g|^2)) / damping.
        let g = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let v = DVector::from_vec(vec![1.0, 0.3, -0.7]);
        let damping = 0.2;
        let coeff = g.dot(&v) / (damping + g.norm_squared());
        let closed: DVector<f64> = (&v - coeff * &g) / damping;
        let expected = closed.dot(&g);

        let exact = influence_raw(
            std::slice::from_ref(&g),
            &v,
            damping,
            InfluenceBackend::Exact,
        )
        .unwrap()[0];
        let approx = influence_raw(
            std::slice::from_ref(&g),
            &v,
            damping,
            InfluenceBackend::Approximate,
        )
        .unwrap()[0];
        assert!((exact - expected).abs() < 1e-10, "{exact} vs {expected}");
        assert!((approx - expected).abs() < 1e-10, "{approx} vs {expected}");
        assert!((exact - approx).abs() < 1e-10);
    }

    #[test]
    fn exact_backend_matches_dense_inverse() {
        // Brute-force route: explicit LU inversion of the damped Hessian.
        let train = vec![
            DVector::from_vec(vec![1.0, 0.2, -0.3, 0.7]),
            DVector::from_vec(vec![-0.5, 1.1, 0.0, 0.2]),
            DVector::from_vec(vec![0.3, -0.2, 0.9, -1.0]),
        ];
        let val = DVector::from_vec(vec![0.4, -0.6, 1.2, 0.1]);
        let damping = 0.1;
        let n = train.len() as f64;
        let mut h = DMatrix::zeros(4, 4);
        for g in &train {
            h += g * g.transpose() / n;
        }
        h += DMatrix::identity(4, 4) * damping;
        let inv = h.try_inverse().unwrap();
        let solved = &inv * &val;
        let raws = influence_raw(&train, &val, damping, InfluenceBackend::Exact).unwrap();
        for (g, raw) in train.iter().zip(raws) {
            assert!((raw - solved.dot(g)).abs() < 1e-8);
        }
    }
}
