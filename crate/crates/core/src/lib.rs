//! Identifiability of deep ReLU networks.
//!
//! Networks are represented with reverse layer indexing (input layer `K`,
//! output layer `0`). The crate provides evaluation, the permutation and
//! positive-rescaling equivalence, linear-region enumeration, numeric checks
//! of the identifiability conditions, and recovery of parameters from
//! function queries by peeling one layer at a time.

pub mod cli;
pub mod conditions;
pub mod equivalence;
pub mod error;
pub mod geometry;
pub mod net;
pub mod oracle;
pub mod recovery;
pub mod regions;

pub use error::{Error, Result};
pub use net::{ActivationPattern, Architecture, Layer, NetworkParams};
