use alloc::string::String;

/// Errors raised by the estimation core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("study {study}: calibration subset is empty")]
    EmptyCalibration { study: String },

    #[error("study {study}: calibration model is separated ({detail})")]
    Separation { study: String, detail: String },

    #[error("study {study}: linear calibration design is singular ({detail})")]
    SingularDesign { study: String, detail: String },

    #[error(
        "stratum {stratum} needs {terms} enumeration terms (limit {limit}); \
         the matching ratio is too large for exact enumeration"
    )]
    EnumerationLimit {
        stratum: String,
        terms: u128,
        limit: u128,
    },

    #[error("non-finite objective: {0}")]
    NonFinite(String),

    #[error("estimate is not a stationary point: gradient norm {0:.3e}")]
    NotStationary(f64),

    #[error("sandwich bread matrix is singular: rank {rank} of {dim}")]
    SingularBread { rank: usize, dim: usize },

    #[error("simulation failed: {0}")]
    Simulation(String),
}

pub type Result<T> = core::result::Result<T, Error>;
