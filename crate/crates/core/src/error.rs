//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bad magic: expected CRTPRB01, found {found:?}")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported shard format version {0}")]
    VersionUnsupported(u32),

    #[error("truncated shard: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("malformed shard header: {0}")]
    MalformedHeader(String),

    #[error("non-finite value in record {record} at feature {feature}")]
    NonFiniteValue { record: usize, feature: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("incompatible shards: {0}")]
    IncompatibleShards(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("training shard contains a single label class")]
    DegenerateLabels,

    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("no train shard for dataset {dataset:?} at layer {layer}")]
    MissingLayerShard { dataset: String, layer: usize },

    #[error("shard has no records")]
    EmptyShard,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("layer mismatch: expected layer {expected}, found {found}")]
    LayerMismatch { expected: usize, found: usize },

    #[error("no {split} shard for dataset {dataset:?}")]
    MissingShard { dataset: String, split: String },

    #[error("zero weight vector for dataset {0:?}")]
    ZeroVector(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("constant input: correlation is undefined")]
    ConstantInput,

    #[error("only {0} datasets in common; at least 2 required")]
    InsufficientOverlap(usize),

    #[error("invalid plant spec: {0}")]
    InvalidSpec(String),

    #[error("layer {0} is not in the layer profile")]
    UnknownLayer(usize),

    #[error("layers do not form a contiguous range: {0}")]
    NonContiguousLayers(String),

    #[error("duplicate entry: {0}")]
    DuplicateEntry(String),

    #[error("reports do not belong together: {0}")]
    MixedReports(String),
}

impl Error {
    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::BadMagic { .. } => "BadMagic",
            Error::VersionUnsupported(_) => "VersionUnsupported",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::IncompatibleShards(_) => "IncompatibleShards",
            Error::InvalidManifest(_) => "InvalidManifest",
            Error::IoFailure { .. } => "IoFailure",
            Error::Json { .. } => "Json",
            Error::DegenerateLabels => "DegenerateLabels",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::MissingLayerShard { .. } => "MissingLayerShard",
            Error::EmptyShard => "EmptyShard",
            Error::EmptyInput(_) => "EmptyInput",
            Error::LayerMismatch { .. } => "LayerMismatch",
            Error::MissingShard { .. } => "MissingShard",
            Error::ZeroVector(_) => "ZeroVector",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::ConstantInput => "ConstantInput",
            Error::InsufficientOverlap(_) => "InsufficientOverlap",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::UnknownLayer(_) => "UnknownLayer",
            Error::NonContiguousLayers(_) => "NonContiguousLayers",
            Error::DuplicateEntry(_) => "DuplicateEntry",
            Error::MixedReports(_) => "MixedReports",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
