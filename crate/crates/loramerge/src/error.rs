//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MergeError>;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Bad length prefix, truncated file, or unparseable header JSON.
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An up tensor without its down counterpart, or vice versa.
    #[error("orphan tensor: {0}")]
    OrphanTensor(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("export rank {requested} exceeds min({rows}, {cols}) for layer {layer}")]
    RankTooLarge {
        layer: String,
        requested: usize,
        rows: usize,
        cols: usize,
    },

    #[error("no layer is present with consistent shape in every adapter")]
    EmptyIntersection,

    #[error("base weights missing layer {0}")]
    BaseMissingLayer(String),

    #[error("unknown layer {0}")]
    UnknownLayer(String),

    /// Raised when negative distances are requested with a single concept;
    /// callers drop the negative term instead.
    #[error("negative distances are undefined with a single concept")]
    NoNegatives,

    #[error("bad merge weights: {0}")]
    BadWeights(String),

    #[error("infeasible synthetic spec: {0}")]
    SpecInfeasible(String),

    #[error("non-finite loss for layer {layer} at step {step}")]
    NonFiniteLoss { layer: String, step: usize },

    #[error("duplicate concept id {0}")]
    DuplicateConcept(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}
