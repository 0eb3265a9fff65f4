//! Linear correctness probes over transformer hidden states.
//!
//! The crate reads per-layer activation dumps ([`shard`]), fits logistic
//! probes whose positive side predicts an incorrect generation ([`probe`]),
//! scores them on held-out data ([`eval`]), and compares the learned
//! directions across datasets and layers ([`analysis`]). [`synth`] produces
//! shards with a planted direction and a closed-form optimal accuracy, which
//! the tests use as ground truth.

pub mod analysis;
pub mod error;
pub mod eval;
pub mod probe;
pub mod shard;
pub mod synth;

pub use error::{Error, Result};
