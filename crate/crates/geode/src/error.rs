//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by tree construction, dictionary fitting, sampling and
/// inference.
#[derive(Debug, Error)]
pub enum GeodeError {
    /// A data set with zero observations or zero coordinates was supplied.
    #[error("data set is empty")]
    EmptyData,

    /// Requested SVD rank exceeds what the matrix supports.
    #[error("requested rank {requested} exceeds min(rows, cols) = {max}")]
    InvalidRank { requested: usize, max: usize },

    /// Vector or matrix width differs from the model's ambient dimension.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A non-finite value reached a numeric kernel.
    #[error("non-finite input in {0}")]
    NonFiniteInput(&'static str),

    /// Dense covariance factorization failed; the supplied variances do not
    /// describe a valid Gaussian.
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    /// The explicit-covariance likelihood path refuses very large ambient
    /// dimensions; use the low-rank path instead.
    #[error("ambient dimension {dim} exceeds the dense-path guard of {max}")]
    DenseGuard { dim: usize, max: usize },

    /// A truncated-distribution sampler was given a non-positive rate.
    #[error("rate must be positive, got {0}")]
    InvalidRate(f64),

    /// A truncated-distribution sampler was given a non-positive shape.
    #[error("shape must be positive, got {0}")]
    InvalidShape(f64),

    /// Every candidate node carried zero posterior mass for some observation.
    #[error("membership weights vanished at every node (corrupt sufficient statistics?)")]
    AllZeroWeights,

    /// The residual quadratic form in the variance update went negative
    /// beyond numerical tolerance.
    #[error("negative quadratic form {0} in variance update")]
    NegativeQuadForm(f64),

    /// The latent-factor posterior solve failed.
    #[error("singular system in latent-factor solve")]
    SingularSystem,

    /// Imputation was requested for a row with no observed coordinates.
    #[error("observation has no observed entries")]
    NoObservedEntries,

    /// Classification models hold different numbers of posterior draws.
    #[error("posterior draw counts differ across models: {0} vs {1}")]
    DrawCountMismatch(usize, usize),

    /// Inclusion probabilities were requested but the sampler never ran an
    /// adaptation step.
    #[error("no adaptation steps were recorded")]
    NoAdaptationSteps,

    /// An invalid hyperparameter combination was supplied.
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),

    /// A missingness mask refers to a coordinate outside the ambient
    /// dimension, or marks every coordinate of a row missing.
    #[error("invalid missingness mask: {0}")]
    BadMask(String),

    /// A clustering tree failed its structural invariants.
    #[error("invalid tree structure: {0}")]
    InvalidTree(String),
}

pub type Result<T> = std::result::Result<T, GeodeError>;
