use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("layer index {k} out of range 0..={depth}")]
    LayerIndex { k: usize, depth: usize },

    #[error("non-finite entry in {0}")]
    NonFinite(String),

    #[error("malformed document: {0}")]
    Parse(String),

    #[error("invalid witness: {0}")]
    Witness(String),

    #[error("normalization impossible: row {row} of M^{k} is zero")]
    NormalizationImpossible { k: usize, row: usize },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("invalid domain: {0}")]
    Domain(String),

    #[error("pattern enumeration over {units} hidden units exceeds the limit of {limit}")]
    EnumerationLimit { units: usize, limit: usize },

    #[error("linear program failed: {0}")]
    Lp(String),

    #[error("query outside the oracle domain")]
    OutsideDomain,

    #[error("query budget exhausted after {0} queries")]
    BudgetExhausted(u64),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("layer {layer}: found {found} full fold hyperplanes, expected {expected}")]
    IdentifiabilityEvidenceMissing {
        layer: usize,
        found: usize,
        expected: usize,
    },

    #[error("orientation unresolved for fold hyperplane {0}")]
    OrientationUnresolved(usize),

    #[error("residual map is not affine (fit residual {0:e})")]
    NotAffine(f64),

    #[error("recovered layer {layer} is not full row rank")]
    RankDeficient { layer: usize },

    #[error("query rejected: {0}")]
    QueryRejected(String),

    #[error("unknown scenario id `{0}`")]
    UnknownScenario(String),

    #[error("invalid option: {0}")]
    InvalidOption(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
