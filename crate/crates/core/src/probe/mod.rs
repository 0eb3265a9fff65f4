//! Linear correctness probes.
//!
//! A [`Probe`] is a weight vector over one layer's hidden states plus a bias.
//! Its score is positive when the model's generation is predicted to be
//! incorrect, so the weight vector points toward uncertainty. Training fits
//! the incorrectness indicator `1 - label` with L2-regularized logistic
//! regression (see [`train`]).

mod lbfgs;
pub mod objective;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lbfgs::{minimize, LbfgsOptions, LbfgsOutcome};
pub use objective::{loss_and_gradient, Objective};
pub use train::{fit_layer_sweep, fit_probe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeighting {
    #[default]
    None,
    /// Each class contributes half of the total sample weight.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Coefficient `lambda` of the `lambda / 2 * ||w||^2` penalty added to the
    /// mean log-loss. The bias is never penalized.
    pub l2_strength: f64,
    pub max_iterations: usize,
    /// Optimization stops once the gradient's infinity norm falls below this.
    pub gradient_tolerance: f64,
    pub standardize: bool,
    /// Recorded for provenance; the solver itself draws no random numbers.
    pub seed: u64,
    pub class_weighting: ClassWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l2_strength: 1.0,
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            standardize: true,
            seed: 42,
            class_weighting: ClassWeighting::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2_strength.is_finite() && self.l2_strength >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "l2_strength must be finite and non-negative, got {}",
                self.l2_strength
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if !(self.gradient_tolerance.is_finite() && self.gradient_tolerance > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gradient_tolerance must be positive, got {}",
                self.gradient_tolerance
            )));
        }
        Ok(())
    }
}

/// Per-feature standardization fitted on a training shard.
///
/// A feature whose training values are all identical has `stds[j] == 0`; it
/// maps to 0 after scaling and its probe weight is exactly 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Scaler {
    pub fn fit<'a, I>(rows: I, dim: usize) -> Self
    where
        I: IntoIterator<Item = &'a [f32]> + Clone,
    {
        let mut n = 0usize;
        let mut sums = vec![0.0f64; dim];
        let mut first: Option<&[f32]> = None;
        let mut constant = vec![true; dim];
        for row in rows.clone() {
            n += 1;
            let reference = *first.get_or_insert(row);
            for j in 0..dim {
                sums[j] += f64::from(row[j]);
                if row[j].to_bits() != reference[j].to_bits() {
                    constant[j] = false;
                }
            }
        }
        if n == 0 {
            return Self {
                means: vec![0.0; dim],
                stds: vec![0.0; dim],
            };
        }
        let first = first.expect("n > 0");
        let means: Vec<f64> = (0..dim)
            .map(|j| if constant[j] { f64::from(first[j]) } else { sums[j] / n as f64 })
            .collect();
        let mut sq = vec![0.0f64; dim];
        for row in rows {
            for j in 0..dim {
                let d = f64::from(row[j]) - means[j];
                sq[j] += d * d;
            }
        }
        let stds = (0..dim)
            .map(|j| if constant[j] { 0.0 } else { (sq[j] / n as f64).sqrt() })
            .collect();
        Self { means, stds }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn is_constant(&self, j: usize) -> bool {
        self.stds[j] == 0.0
    }

    #[inline]
    pub fn transform_into(&self, h: &[f32], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let s = self.stds[j];
            *o = if s == 0.0 { 0.0 } else { (f64::from(h[j]) - self.means[j]) / s };
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    /// Regularized training objective at the returned parameters.
    pub final_logloss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_inf_norm: f64,
}

/// A learned uncertainty direction and bias for one (model, dataset, layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub model_id: String,
    pub dataset_id: String,
    pub layer_index: usize,
    pub bias: f64,
    /// Direction in the space the probe was fitted in (standardized features
    /// when `scaler` is present).
    pub weights: Vec<f64>,
    pub scaler: Option<Scaler>,
    pub config: TrainConfig,
    pub diagnostics: TrainDiagnostics,
}

impl Probe {
    pub fn hidden_dim(&self) -> usize {
        self.weights.len()
    }

    /// `w . h' + b` where `h'` is `h` after the probe's scaler.
    pub fn score(&self, hidden_state: &[f32]) -> Result<f64> {
        if hidden_state.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                found: hidden_state.len(),
            });
        }
        Ok(self.score_unchecked(hidden_state))
    }

    pub(crate) fn score_unchecked(&self, h: &[f32]) -> f64 {
        let dot = match &self.scaler {
            Some(s) => self
                .weights
                .iter()
                .enumerate()
                .map(|(j, w)| {
                    let sd = s.stds[j];
                    if sd == 0.0 {
                        0.0
                    } else {
                        w * ((f64::from(h[j]) - s.means[j]) / sd)
                    }
                })
                .sum::<f64>(),
            None => self.weights.iter().zip(h).map(|(w, x)| w * f64::from(*x)).sum(),
        };
        dot + self.bias
    }

    /// The weight vector mapped back to raw activation coordinates
    /// (`w_j / std_j`, or 0 for constant features).
    pub fn activation_space_direction(&self) -> Vec<f64> {
        match &self.scaler {
            Some(s) => self
                .weights
                .iter()
                .zip(&s.stds)
                .map(|(w, sd)| if *sd == 0.0 { 0.0 } else { w / sd })
                .collect(),
            None => self.weights.clone(),
        }
    }

    /// Returns a copy with weights and bias multiplied by `c`.
    pub fn rescaled(&self, c: f64) -> Probe {
        let mut p = self.clone();
        p.weights.iter_mut().for_each(|w| *w *= c);
        p.bias *= c;
        p
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::json("probe", e))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Probe> {
        let probe: Probe = serde_json::from_str(text).map_err(|e| Error::json("probe", e))?;
        probe.check()?;
        Ok(probe)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Probe> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let probe: Probe =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        probe.check()?;
        Ok(probe)
    }

    fn check(&self) -> Result<()> {
        if let Some(s) = &self.scaler {
            if s.means.len() != self.weights.len() || s.stds.len() != self.weights.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.weights.len(),
                    found: s.means.len().min(s.stds.len()),
                });
            }
            for (j, (sd, w)) in s.stds.iter().zip(&self.weights).enumerate() {
                if sd.is_nan() || *sd < 0.0 || (*sd == 0.0 && *w != 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "feature {j}: stddev {sd} with weight {w}; constant features must carry weight 0"
                    )));
                }
            }
        }
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidConfig("probe parameters must be finite".into()));
        }
        Ok(())
    }
}
