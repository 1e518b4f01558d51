//! Command-line toolkit around the `geode` density-estimation library:
//! delimited matrix I/O, run configuration, a versioned model container,
//! simulation scenario generators, a multiscale principal-component
//! regression baseline, and a scaling benchmark.

pub mod bench;
pub mod config;
pub mod matrix;
pub mod model_file;
pub mod mpcr;
pub mod scenario;

use thiserror::Error;

/// Process-level error taxonomy; each variant owns an exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, flags, or hyperparameters — exit 2.
    #[error("config error: {0}")]
    Config(String),
    /// Unreadable, malformed, or inconsistent data/model files — exit 3.
    #[error("data error: {0}")]
    Data(String),
    /// Numerical failure inside the algorithms — exit 4.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<geode::GeodeError> for CliError {
    fn from(e: geode::GeodeError) -> Self {
        use geode::GeodeError::*;
        match e {
            InvalidHyper(_) | InvalidRank { .. } => CliError::Config(e.to_string()),
            EmptyData | DimensionMismatch { .. } | BadMask(_) | NoObservedEntries
            | DrawCountMismatch(_, _) | NoAdaptationSteps => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
