use thiserror::Error;

/// Errors shared across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("distribution support must be nonempty")]
    EmptySupport,

    #[error("distribution support contains duplicate elements")]
    DuplicateSupport,

    #[error("mass at support index {index} is {mass}, must be finite and nonnegative")]
    InvalidMass { index: usize, mass: f64 },

    #[error("masses sum to {sum}; deviation from 1 exceeds the renormalization tolerance")]
    NotNormalized { sum: f64 },

    #[error("distributions are defined on different supports")]
    SupportMismatch,

    #[error("{what} must match the space it is used with: {detail}")]
    SpaceMismatch { what: &'static str, detail: String },

    #[error("population must contain at least one agent")]
    EmptyPopulation,

    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),

    #[error("decision grid would hold {rules} rules, above the cap of {cap}")]
    GridTooLarge { rules: u128, cap: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("policy document line {line}: {msg}")]
    PolicyFormat { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
