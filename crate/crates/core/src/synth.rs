//! Synthetic activation shards with a planted linear uncertainty direction.
//!
//! Each example has a latent class `y = +1` (incorrect, label 0) or
//! `y = -1` (correct, label 1), split exactly in half and shuffled. At layer
//! `l` its hidden state is
//!
//! ```text
//! h = (s * scale_l * y - bias_true) * u + noise,   noise ~ N(0, sigma^2 I),   sigma = s / snr
//! ```
//!
//! with `s = SIGNAL_MAGNITUDE`. Projected on `u` the classes are two
//! Gaussians at `-bias_true +- s * scale_l`; the Bayes rule is
//! `u . h + bias_true > 0 => incorrect` and its accuracy is
//! `Phi(scale_l * snr)`.
//!
//! Labels are shared across layers (record `k` is the same example in every
//! layer's shard); noise is drawn independently per layer from a seed derived
//! from `(seed, split, layer)`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::shard::{ActivationRecord, ActivationShard, Label, ShardSet, Split};

/// Magnitude `s` of the class signal along the planted direction.
pub const SIGNAL_MAGNITUDE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub model_id: String,
    pub dataset_id: String,
    pub hidden_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Unit vector `u`.
    pub direction: Vec<f64>,
    pub bias_true: f64,
    /// Ratio of signal magnitude to noise standard deviation.
    pub signal_to_noise: f64,
    /// Signal scale in `[0, 1]` for each layer; keys must be `0..L`.
    pub layer_profile: BTreeMap<usize, f64>,
    pub seed: u64,
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be positive".into());
        }
        if self.direction.len() != self.hidden_dim {
            return bad(format!(
                "direction has {} entries, hidden_dim is {}",
                self.direction.len(),
                self.hidden_dim
            ));
        }
        let norm = self.direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm.is_nan() || (norm - 1.0).abs() > 1e-9 {
            return bad(format!("direction norm is {norm}, expected 1"));
        }
        if self.signal_to_noise.is_nan() || self.signal_to_noise <= 0.0 {
            return bad(format!("signal_to_noise must be positive, got {}", self.signal_to_noise));
        }
        if !self.bias_true.is_finite() {
            return bad("bias_true must be finite".into());
        }
        if self.layer_profile.is_empty() {
            return bad("layer_profile is empty".into());
        }
        for (i, (&layer, &scale)) in self.layer_profile.iter().enumerate() {
            if layer != i {
                return bad(format!("layer_profile keys must be 0..L; found {layer} at position {i}"));
            }
            if !(0.0..=1.0).contains(&scale) {
                return bad(format!("scale {scale} of layer {layer} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.layer_profile.len()
    }

    fn noise_std(&self) -> f64 {
        SIGNAL_MAGNITUDE / self.signal_to_noise
    }
}

/// Closed-form accuracy of the optimal classifier at `layer_index`.
pub fn bayes_accuracy(spec: &PlantSpec, layer_index: usize) -> Result<f64> {
    let scale = *spec
        .layer_profile
        .get(&layer_index)
        .ok_or(Error::UnknownLayer(layer_index))?;
    if scale == 0.0 {
        return Ok(0.5);
    }
    Ok(standard_normal_cdf(scale * spec.signal_to_noise))
}

fn standard_normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Generates train and test shards for every layer of the profile.
pub fn generate(spec: &PlantSpec) -> Result<ShardSet> {
    spec.validate()?;
    let mut set = ShardSet::new(spec.model_id.clone(), spec.layer_count(), spec.hidden_dim);
    for shard in generate_shards(spec)? {
        set.insert(shard)?;
    }
    Ok(set)
}

/// Generates several datasets for the same model into one set.
pub fn generate_many(specs: &[PlantSpec]) -> Result<ShardSet> {
    let first = specs
        .first()
        .ok_or_else(|| Error::InvalidSpec("no plant specs supplied".into()))?;
    let mut set = ShardSet::new(first.model_id.clone(), first.layer_count(), first.hidden_dim);
    for spec in specs {
        spec.validate()?;
        if spec.model_id != first.model_id
            || spec.hidden_dim != first.hidden_dim
            || spec.layer_count() != first.layer_count()
        {
            return Err(Error::InvalidSpec(format!(
                "dataset {:?} disagrees with {:?} on model, hidden_dim or layer count",
                spec.dataset_id, first.dataset_id
            )));
        }
        for shard in generate_shards(spec)? {
            set.insert(shard)?;
        }
    }
    Ok(set)
}

fn generate_shards(spec: &PlantSpec) -> Result<Vec<ActivationShard>> {
    let jobs: Vec<(Split, usize)> = [Split::Train, Split::Test]
        .into_iter()
        .flat_map(|split| spec.layer_profile.keys().map(move |&layer| (split, layer)))
        .collect();
    let classes: BTreeMap<Split, Vec<f64>> = [Split::Train, Split::Test]
        .into_iter()
        .map(|split| (split, latent_classes(spec, split)))
        .collect();
    jobs.into_par_iter()
        .map(|(split, layer)| layer_shard(spec, split, layer, &classes[&split]))
        .collect()
}

fn latent_classes(spec: &PlantSpec, split: Split) -> Vec<f64> {
    let n = match split {
        Split::Train => spec.n_train,
        Split::Test => spec.n_test,
    };
    let mut classes: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { -1.0 }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, split_tag(split), u64::MAX));
    classes.shuffle(&mut rng);
    classes
}

fn layer_shard(spec: &PlantSpec, split: Split, layer: usize, classes: &[f64]) -> Result<ActivationShard> {
    let scale = spec.layer_profile[&layer];
    let sigma = spec.noise_std();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, split_tag(split), layer as u64));
    let records = classes
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let along = SIGNAL_MAGNITUDE * scale * y - spec.bias_true;
            let hidden_state = spec
                .direction
                .iter()
                .map(|u| {
                    let noise: f64 = rng.sample(StandardNormal);
                    (along * u + sigma * noise) as f32
                })
                .collect();
            let label = if y > 0.0 { Label::Incorrect } else { Label::Correct };
            ActivationRecord::new(format!("{}-{}-{i:06}", spec.dataset_id, split), hidden_state, label)
        })
        .collect();
    ActivationShard::from_records(
        spec.model_id.clone(),
        spec.dataset_id.clone(),
        split,
        layer,
        spec.hidden_dim,
        records,
    )
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Train => 0x7472_6169_6e00_0000,
        Split::Test => 0x7465_7374_0000_0000,
    }
}

/// Mixes a base seed with stream identifiers (splitmix64 finalizer).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.rotate_left(17) ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A random unit vector, uniform on the sphere.
pub fn random_unit_vector(dim: usize, seed: u64) -> Vec<f64> {
    orthonormal_directions(dim, 1, seed).pop().expect("one direction")
}

/// `count` mutually orthogonal unit vectors (Gram-Schmidt on Gaussian draws).
///
/// Panics if `count > dim`.
pub fn orthonormal_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(count <= dim, "cannot draw {count} orthogonal directions in {dim} dimensions");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        // Two passes of classical Gram-Schmidt for numerical orthogonality.
        for _ in 0..2 {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Ground truth written next to generated shards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSidecar {
    pub dataset_id: String,
    pub direction: Vec<f64>,
    pub bias_true: f64,
    pub signal_to_noise: f64,
    pub layer_profile: BTreeMap<usize, f64>,
    pub bayes_accuracy: BTreeMap<usize, f64>,
}

impl PlantSidecar {
    pub fn from_spec(spec: &PlantSpec) -> Result<Self> {
        let bayes_accuracy = spec
            .layer_profile
            .keys()
            .map(|&l| bayes_accuracy(spec, l).map(|a| (l, a)))
            .collect::<Result<_>>()?;
        Ok(Self {
            dataset_id: spec.dataset_id.clone(),
            direction: spec.direction.clone(),
            bias_true: spec.bias_true,
            signal_to_noise: spec.signal_to_noise,
            layer_profile: spec.layer_profile.clone(),
            bayes_accuracy,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json("plant sidecar", e))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}
