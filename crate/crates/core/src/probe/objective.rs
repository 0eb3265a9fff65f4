//! Regularized logistic loss on incorrectness targets.
//!
//! For parameters `(w, b)` over `n` records with scaled features `x_i`,
//! targets `t_i = 1 - label_i` and sample weights `c_i`:
//!
//! ```text
//! f(w, b) = (1/n) * sum_i c_i * (softplus(z_i) - t_i * z_i) + (lambda/2) * ||w||^2
//! z_i     = w . x_i + b
//! ```
//!
//! With `class_weighting = none` every `c_i` is 1; with `balanced`,
//! `c_i = n / (2 * n_class(i))` so both classes carry equal total weight.

use crate::error::{Error, Result};
use crate::shard::ActivationShard;

use super::{ClassWeighting, Scaler, TrainConfig};

/// Dense design matrix plus everything needed to evaluate the objective.
#[derive(Debug, Clone)]
pub struct Objective {
    features: Vec<f64>,
    targets: Vec<f64>,
    sample_weights: Vec<f64>,
    n: usize,
    dim: usize,
    l2: f64,
}

impl Objective {
    /// Builds the objective for a shard. Returns the scaler used, if any.
    pub fn from_shard(shard: &ActivationShard, config: &TrainConfig) -> (Self, Option<Scaler>) {
        let dim = shard.hidden_dim();
        let records = shard.records();
        let n = records.len();
        let scaler = config
            .standardize
            .then(|| Scaler::fit(records.iter().map(|r| r.hidden_state.as_slice()), dim));

        let mut features = vec![0.0f64; n * dim];
        for (row, record) in features.chunks_exact_mut(dim.max(1)).zip(records) {
            match &scaler {
                Some(s) => s.transform_into(&record.hidden_state, row),
                None => row
                    .iter_mut()
                    .zip(&record.hidden_state)
                    .for_each(|(o, x)| *o = f64::from(*x)),
            }
        }
        let targets: Vec<f64> = records
            .iter()
            .map(|r| if r.label.is_correct() { 0.0 } else { 1.0 })
            .collect();
        let sample_weights = match config.class_weighting {
            ClassWeighting::None => vec![1.0; n],
            ClassWeighting::Balanced => {
                let positives = targets.iter().filter(|t| **t == 1.0).count();
                let negatives = n - positives;
                targets
                    .iter()
                    .map(|t| {
                        let count = if *t == 1.0 { positives } else { negatives };
                        n as f64 / (2.0 * count as f64)
                    })
                    .collect()
            }
        };
        let objective = Self {
            features,
            targets,
            sample_weights,
            n,
            dim,
            l2: config.l2_strength,
        };
        (objective, scaler)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Objective value and gradient at `params = [w_0 .. w_{d-1}, b]`.
    pub fn value_and_gradient(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        debug_assert_eq!(params.len(), self.dim + 1);
        let (w, b) = params.split_at(self.dim);
        let b = b[0];
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        let mut bias_grad = 0.0;
        for i in 0..self.n {
            let x = &self.features[i * self.dim..(i + 1) * self.dim];
            let z = dot(w, x) + b;
            let t = self.targets[i];
            let c = self.sample_weights[i];
            loss += c * (softplus(z) - t * z);
            let r = c * (sigmoid(z) - t);
            for (g, xj) in grad[..self.dim].iter_mut().zip(x) {
                *g += r * xj;
            }
            bias_grad += r;
        }
        let inv_n = 1.0 / self.n as f64;
        let mut penalty = 0.0;
        for (g, wj) in grad[..self.dim].iter_mut().zip(w) {
            *g = *g * inv_n + self.l2 * wj;
            penalty += wj * wj;
        }
        grad[self.dim] = bias_grad * inv_n;
        loss * inv_n + 0.5 * self.l2 * penalty
    }

    /// Objective at the best intercept-only model (all weights zero).
    pub fn constant_baseline(&self) -> f64 {
        let total: f64 = self.sample_weights.iter().sum();
        let positive: f64 = self
            .targets
            .iter()
            .zip(&self.sample_weights)
            .map(|(t, c)| t * c)
            .sum();
        let p = positive / total;
        if p <= 0.0 || p >= 1.0 {
            return 0.0;
        }
        -(total / self.n as f64) * (p * p.ln() + (1.0 - p) * (1.0 - p).ln())
    }
}

/// Regularized mean logistic loss and its exact gradient with respect to
/// `[weights.., bias]`, on the incorrectness targets of `shard`.
///
/// Features are standardized with a scaler fitted on `shard` itself when
/// `config.standardize` is set, matching what [`super::fit_probe`] optimizes.
pub fn loss_and_gradient(
    params: &[f64],
    shard: &ActivationShard,
    config: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    if params.len() != shard.hidden_dim() + 1 {
        return Err(Error::DimensionMismatch {
            expected: shard.hidden_dim() + 1,
            found: params.len(),
        });
    }
    if shard.is_empty() {
        return Err(Error::EmptyShard);
    }
    let (objective, _) = Objective::from_shard(shard, config);
    let mut grad = vec![0.0; params.len()];
    let value = objective.value_and_gradient(params, &mut grad);
    Ok((value, grad))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
