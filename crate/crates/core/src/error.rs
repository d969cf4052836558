use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported operation: {0}")]
    UnsupportedOp(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("antipodal ambiguity: dot product {dot} is within tolerance of -1")]
    Antipodal { dot: f64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("rank deficient neighborhood: achieved rank {achieved}, requested {requested}")]
    RankDeficient { achieved: usize, requested: usize },

    #[error("negative sampling exhausted after {attempts} attempts ({found} of {needed} found)")]
    SamplingExhausted {
        needed: usize,
        found: usize,
        attempts: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}
