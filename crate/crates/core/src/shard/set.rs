//! A model's shards bound together by a JSON manifest.
//!
//! Manifest schema:
//!
//! ```json
//! {
//!   "model_id": "llama-8b",
//!   "layer_count": 32,
//!   "hidden_dim": 4096,
//!   "datasets": [
//!     {
//!       "dataset_id": "triviaqa",
//!       "splits": ["train", "test"],
//!       "layers": [0, 1],
//!       "paths": [
//!         {"split": "train", "layer_index": 0, "path": "triviaqa.train.L000.shard"}
//!       ]
//!     }
//!   ]
//! }
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{format, merge_shards, ActivationShard, Split, UNIFIED_DATASET_ID};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_id: String,
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub datasets: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub dataset_id: String,
    pub splits: Vec<Split>,
    pub layers: Vec<usize>,
    pub paths: Vec<ShardPath>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPath {
    pub split: Split,
    pub layer_index: usize,
    pub path: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        manifest.check()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Structural checks that need no shard I/O.
    pub fn check(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::InvalidManifest("hidden_dim must be positive".into()));
        }
        let mut seen_datasets = BTreeSet::new();
        let mut seen_keys = BTreeSet::new();
        for entry in &self.datasets {
            if !seen_datasets.insert(entry.dataset_id.as_str()) {
                return Err(Error::InvalidManifest(format!(
                    "dataset {:?} listed twice",
                    entry.dataset_id
                )));
            }
            if let Some(&layer) = entry.layers.iter().find(|&&l| l >= self.layer_count) {
                return Err(Error::InvalidManifest(format!(
                    "dataset {:?} lists layer {layer} but layer_count is {}",
                    entry.dataset_id, self.layer_count
                )));
            }
            for p in &entry.paths {
                if !entry.splits.contains(&p.split) || !entry.layers.contains(&p.layer_index) {
                    return Err(Error::InvalidManifest(format!(
                        "dataset {:?}: path for ({}, layer {}) outside declared splits/layers",
                        entry.dataset_id, p.split, p.layer_index
                    )));
                }
                if !seen_keys.insert((entry.dataset_id.as_str(), p.split, p.layer_index)) {
                    return Err(Error::DuplicateEntry(format!(
                        "dataset {:?} has two {} shards for layer {}",
                        entry.dataset_id, p.split, p.layer_index
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ShardKey {
    pub dataset_id: String,
    pub split: Split,
    pub layer_index: usize,
}

impl ShardKey {
    pub fn new(dataset_id: impl Into<String>, split: Split, layer_index: usize) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            split,
            layer_index,
        }
    }
}

/// Shards of one model, at most one per (dataset, split, layer).
#[derive(Debug, Clone, PartialEq)]
pub struct ShardSet {
    model_id: String,
    layer_count: usize,
    hidden_dim: usize,
    shards: BTreeMap<ShardKey, ActivationShard>,
}

impl ShardSet {
    pub fn new(model_id: impl Into<String>, layer_count: usize, hidden_dim: usize) -> Self {
        Self {
            model_id: model_id.into(),
            layer_count,
            hidden_dim,
            shards: BTreeMap::new(),
        }
    }

    /// Loads and validates every shard listed in the manifest at `path`.
    pub fn open(path: &Path) -> Result<Self> {
        let manifest = Manifest::load(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let jobs: Vec<(ShardKey, PathBuf)> = manifest
            .datasets
            .iter()
            .flat_map(|entry| {
                entry.paths.iter().map(|p| {
                    (
                        ShardKey::new(entry.dataset_id.clone(), p.split, p.layer_index),
                        base.join(&p.path),
                    )
                })
            })
            .collect();
        let loaded: Vec<(ShardKey, ActivationShard)> = jobs
            .into_par_iter()
            .map(|(key, file)| format::read_shard(&file).map(|shard| (key, shard)))
            .collect::<Result<_>>()?;

        let mut set = ShardSet::new(manifest.model_id, manifest.layer_count, manifest.hidden_dim);
        for (key, shard) in loaded {
            let h = shard.header();
            if h.dataset_id != key.dataset_id || h.split != key.split || h.layer_index != key.layer_index {
                return Err(Error::InvalidManifest(format!(
                    "manifest entry ({}, {}, layer {}) points at a shard for ({}, {}, layer {})",
                    key.dataset_id, key.split, key.layer_index, h.dataset_id, h.split, h.layer_index
                )));
            }
            set.insert(shard)?;
        }
        Ok(set)
    }

    /// Adds a shard, enforcing the set invariants.
    pub fn insert(&mut self, shard: ActivationShard) -> Result<()> {
        let h = shard.header();
        if h.model_id != self.model_id {
            return Err(Error::IncompatibleShards(format!(
                "shard model_id {:?} differs from set model_id {:?}",
                h.model_id, self.model_id
            )));
        }
        if h.hidden_dim != self.hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: self.hidden_dim,
                found: h.hidden_dim,
            });
        }
        if h.layer_index >= self.layer_count {
            return Err(Error::InvalidManifest(format!(
                "layer {} outside layer_count {}",
                h.layer_index, self.layer_count
            )));
        }
        let key = ShardKey::new(h.dataset_id.clone(), h.split, h.layer_index);
        if self.shards.contains_key(&key) {
            return Err(Error::DuplicateEntry(format!(
                "({}, {}, layer {})",
                key.dataset_id, key.split, key.layer_index
            )));
        }
        self.shards.insert(key, shard);
        Ok(())
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }

    pub fn get(&self, dataset_id: &str, split: Split, layer_index: usize) -> Option<&ActivationShard> {
        self.shards.get(&ShardKey::new(dataset_id, split, layer_index))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ShardKey, &ActivationShard)> {
        self.shards.iter()
    }

    /// Dataset ids in lexicographic order.
    pub fn dataset_ids(&self) -> Vec<String> {
        let ids: BTreeSet<&str> = self.shards.keys().map(|k| k.dataset_id.as_str()).collect();
        ids.into_iter().map(str::to_owned).collect()
    }

    /// Layers present for a dataset and split, ascending.
    pub fn layers(&self, dataset_id: &str, split: Split) -> Vec<usize> {
        self.shards
            .keys()
            .filter(|k| k.dataset_id == dataset_id && k.split == split)
            .map(|k| k.layer_index)
            .collect()
    }

    /// Merges the `split` shards of every dataset at `layer_index`, in
    /// dataset order, into one unified pool.
    pub fn unified(&self, split: Split, layer_index: usize) -> Result<ActivationShard> {
        let shards: Vec<&ActivationShard> = self
            .shards
            .iter()
            .filter(|(k, _)| k.split == split && k.layer_index == layer_index && k.dataset_id != UNIFIED_DATASET_ID)
            .map(|(_, s)| s)
            .collect();
        if shards.is_empty() {
            return Err(Error::MissingShard {
                dataset: UNIFIED_DATASET_ID.into(),
                split: split.to_string(),
            });
        }
        merge_shards(shards)
    }

    /// Manifest describing this set with the given relative shard paths.
    pub fn manifest_with<F>(&self, mut path_for: F) -> Manifest
    where
        F: FnMut(&ShardKey) -> PathBuf,
    {
        let mut datasets: BTreeMap<&str, DatasetEntry> = BTreeMap::new();
        for key in self.shards.keys() {
            let entry = datasets.entry(key.dataset_id.as_str()).or_insert_with(|| DatasetEntry {
                dataset_id: key.dataset_id.clone(),
                splits: Vec::new(),
                layers: Vec::new(),
                paths: Vec::new(),
            });
            if !entry.splits.contains(&key.split) {
                entry.splits.push(key.split);
            }
            if !entry.layers.contains(&key.layer_index) {
                entry.layers.push(key.layer_index);
            }
            entry.paths.push(ShardPath {
                split: key.split,
                layer_index: key.layer_index,
                path: path_for(key),
            });
        }
        let datasets = datasets
            .into_values()
            .map(|mut e| {
                e.splits.sort();
                e.layers.sort_unstable();
                e
            })
            .collect();
        Manifest {
            model_id: self.model_id.clone(),
            layer_count: self.layer_count,
            hidden_dim: self.hidden_dim,
            datasets,
        }
    }

    /// Writes every shard into `dir` plus `manifest.json`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = BTreeSet::new();
        for key in self.shards.keys() {
            if !names.insert(shard_file_name(key)) {
                return Err(Error::DuplicateEntry(format!(
                    "dataset ids collide after file-name sanitizing: {:?}",
                    key.dataset_id
                )));
            }
        }
        self.shards.par_iter().try_for_each(|(key, shard)| {
            format::write_shard(shard.header(), shard.records(), &dir.join(shard_file_name(key)))
        })?;
        let manifest = self.manifest_with(|key| PathBuf::from(shard_file_name(key)));
        let path = dir.join("manifest.json");
        manifest.save(&path)?;
        Ok(path)
    }
}

/// `<dataset>.<split>.L<layer>.shard` with unsafe characters replaced.
pub fn shard_file_name(key: &ShardKey) -> String {
    format!("{}.{}.L{:03}.shard", sanitize_id(&key.dataset_id), key.split, key.layer_index)
}

/// Replaces every character other than ASCII alphanumerics, `-` and `_` with `_`.
pub fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_') { c } else { '_' })
        .collect()
}
