//! Activation shards: every hidden state captured for one
//! (model, dataset, split, layer), together with correctness labels.
//!
//! A shard is the unit exchanged between the activation extractor and the
//! analysis engine. See [`format`] for the on-disk layout and [`set`] for the
//! manifest that binds shards of one model together.

pub mod format;
pub mod set;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{decode_shard, encode_shard, read_shard, write_shard, FORMAT_VERSION, MAGIC};
pub use set::{sanitize_id, shard_file_name, DatasetEntry, Manifest, ShardKey, ShardPath, ShardSet};

/// Dataset id reserved for pools built by [`merge_shards`].
pub const UNIFIED_DATASET_ID: &str = "__unified__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train or test)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSemantics {
    /// Label 1 means the model's own answer matched a gold answer.
    CorrectIs1,
}

/// Correctness of the model's generation for one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Incorrect,
    Correct,
}

impl Label {
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Label::Incorrect),
            1 => Some(Label::Correct),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Label::Incorrect => 0,
            Label::Correct => 1,
        }
    }

    pub fn is_correct(self) -> bool {
        self == Label::Correct
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub format_version: u32,
    pub model_id: String,
    pub dataset_id: String,
    pub split: Split,
    pub layer_index: usize,
    pub hidden_dim: usize,
    pub num_records: usize,
    pub dtype: Dtype,
    pub label_semantics: LabelSemantics,
}

impl ShardHeader {
    pub fn new(
        model_id: impl Into<String>,
        dataset_id: impl Into<String>,
        split: Split,
        layer_index: usize,
        hidden_dim: usize,
        num_records: usize,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
            split,
            layer_index,
            hidden_dim,
            num_records,
            dtype: Dtype::F32,
            label_semantics: LabelSemantics::CorrectIs1,
        }
    }

    /// Length in bytes of the f32 payload described by this header.
    pub fn payload_bytes(&self) -> Option<u64> {
        (self.num_records as u64)
            .checked_mul(self.hidden_dim as u64)?
            .checked_mul(4)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub example_id: String,
    pub hidden_state: Vec<f32>,
    pub label: Label,
}

impl ActivationRecord {
    pub fn new(example_id: impl Into<String>, hidden_state: Vec<f32>, label: Label) -> Self {
        Self {
            example_id: example_id.into(),
            hidden_state,
            label,
        }
    }
}

/// A validated header plus its records.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationShard {
    header: ShardHeader,
    records: Vec<ActivationRecord>,
}

impl ActivationShard {
    /// Builds a shard, checking the header against the records.
    pub fn new(header: ShardHeader, records: Vec<ActivationRecord>) -> Result<Self> {
        validate(&header, &records)?;
        Ok(Self { header, records })
    }

    /// Builds a shard whose `num_records` is taken from `records`.
    pub fn from_records(
        model_id: impl Into<String>,
        dataset_id: impl Into<String>,
        split: Split,
        layer_index: usize,
        hidden_dim: usize,
        records: Vec<ActivationRecord>,
    ) -> Result<Self> {
        let header = ShardHeader::new(
            model_id,
            dataset_id,
            split,
            layer_index,
            hidden_dim,
            records.len(),
        );
        Self::new(header, records)
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }

    pub fn records(&self) -> &[ActivationRecord] {
        &self.records
    }

    pub fn into_parts(self) -> (ShardHeader, Vec<ActivationRecord>) {
        (self.header, self.records)
    }

    pub fn hidden_dim(&self) -> usize {
        self.header.hidden_dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of records labelled correct and incorrect, in that order.
    pub fn label_counts(&self) -> (usize, usize) {
        let correct = self.records.iter().filter(|r| r.label.is_correct()).count();
        (correct, self.records.len() - correct)
    }
}

pub(crate) fn validate(header: &ShardHeader, records: &[ActivationRecord]) -> Result<()> {
    if header.format_version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(header.format_version));
    }
    if header.hidden_dim == 0 {
        return Err(Error::MalformedHeader("hidden_dim must be positive".into()));
    }
    if header.num_records != records.len() {
        return Err(Error::MalformedHeader(format!(
            "header declares {} records but {} were supplied",
            header.num_records,
            records.len()
        )));
    }
    for (i, record) in records.iter().enumerate() {
        if record.hidden_state.len() != header.hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: header.hidden_dim,
                found: record.hidden_state.len(),
            });
        }
        if let Some(j) = record.hidden_state.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                record: i,
                feature: j,
            });
        }
    }
    Ok(())
}

/// Concatenates shards of one model, layer and split into a single pool
/// labelled with [`UNIFIED_DATASET_ID`].
pub fn merge_shards<'a, I>(shards: I) -> Result<ActivationShard>
where
    I: IntoIterator<Item = &'a ActivationShard>,
{
    let mut iter = shards.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::EmptyInput("merge_shards needs at least one shard".into()))?;
    let base = first.header();
    let mut records = first.records().to_vec();
    for shard in iter {
        let h = shard.header();
        let mismatch = if h.model_id != base.model_id {
            Some(format!("model_id {:?} vs {:?}", base.model_id, h.model_id))
        } else if h.layer_index != base.layer_index {
            Some(format!("layer_index {} vs {}", base.layer_index, h.layer_index))
        } else if h.split != base.split {
            Some(format!("split {} vs {}", base.split, h.split))
        } else if h.hidden_dim != base.hidden_dim {
            Some(format!("hidden_dim {} vs {}", base.hidden_dim, h.hidden_dim))
        } else {
            None
        };
        if let Some(msg) = mismatch {
            return Err(Error::IncompatibleShards(msg));
        }
        records.extend_from_slice(shard.records());
    }
    ActivationShard::from_records(
        base.model_id.clone(),
        UNIFIED_DATASET_ID,
        base.split,
        base.layer_index,
        base.hidden_dim,
        records,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shard(dataset: &str, layer: usize, n: usize) -> ActivationShard {
        let records = (0..n)
            .map(|i| {
                ActivationRecord::new(
                    format!("{dataset}-{i}"),
                    vec![i as f32, -(i as f32)],
                    Label::from_bit((i % 2) as u8).unwrap(),
                )
            })
            .collect();
        ActivationShard::from_records("m", dataset, Split::Train, layer, 2, records).unwrap()
    }

    #[test]
    fn merge_counts_and_order() {
        let a = shard("a", 0, 3);
        let b = shard("b", 0, 2);
        let merged = merge_shards([&a, &b]).unwrap();
        assert_eq!(merged.len(), 5);
        assert_eq!(merged.header().num_records, 5);
        assert_eq!(merged.header().dataset_id, UNIFIED_DATASET_ID);
        let ids: Vec<_> = merged.records().iter().map(|r| r.example_id.as_str()).collect();
        assert_eq!(ids, ["a-0", "a-1", "a-2", "b-0", "b-1"]);
    }

    #[test]
    fn merge_single_is_identity_on_records() {
        let a = shard("a", 4, 3);
        let merged = merge_shards([&a]).unwrap();
        assert_eq!(merged.records(), a.records());
        assert_eq!(merged.header().dataset_id, UNIFIED_DATASET_ID);
        assert_eq!(merged.header().layer_index, 4);
    }

    #[test]
    fn merge_rejects_layer_mismatch() {
        let a = shard("a", 5, 1);
        let b = shard("b", 6, 1);
        let err = merge_shards([&a, &b]).unwrap_err();
        assert_eq!(err.kind(), "IncompatibleShards");
    }

    #[test]
    fn merge_rejects_split_mismatch() {
        let a = shard("a", 0, 1);
        let (mut h, r) = shard("b", 0, 1).into_parts();
        h.split = Split::Test;
        let b = ActivationShard::new(h, r).unwrap();
        assert_eq!(merge_shards([&a, &b]).unwrap_err().kind(), "IncompatibleShards");
    }

    #[test]
    fn merge_empty_input() {
        let none: [&ActivationShard; 0] = [];
        assert_eq!(merge_shards(none).unwrap_err().kind(), "EmptyInput");
    }

    #[test]
    fn merge_is_associative_on_records() {
        let a = shard("a", 1, 2);
        let b = shard("b", 1, 3);
        let c = shard("c", 1, 1);
        let left = merge_shards([&merge_shards([&a, &b]).unwrap(), &c]).unwrap();
        let right = merge_shards([&a, &merge_shards([&b, &c]).unwrap()]).unwrap();
        assert_eq!(left.records(), right.records());
    }

    #[test]
    fn new_rejects_wrong_dim_and_nan() {
        let r = vec![ActivationRecord::new("x", vec![1.0], Label::Correct)];
        let err = ActivationShard::from_records("m", "d", Split::Train, 0, 2, r).unwrap_err();
        assert_eq!(err.kind(), "DimensionMismatch");

        let r = vec![ActivationRecord::new("x", vec![1.0, f32::NAN], Label::Correct)];
        let err = ActivationShard::from_records("m", "d", Split::Train, 0, 2, r).unwrap_err();
        assert_eq!(err.kind(), "NonFiniteValue");
    }
}
