use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected length {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid population: {0}")]
    Population(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("estimator undefined at assignment {assignment}: {reason}")]
    UndefinedEstimator { assignment: String, reason: String },

    #[error("support of about {size:.0} assignments exceeds the enumeration cap of {cap}; use sampling (mc) mode")]
    EnumerationTooLarge { size: f64, cap: usize },

    #[error("{pairs} matched pairs give 2^{pairs} permutations, more than the limit of 2^{max}")]
    TooManyPairs { pairs: usize, max: usize },

    #[error("event has zero probability: {0}")]
    ZeroProbability(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
