use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("attention row {row} has no unmasked key")]
    FullyMaskedRow { row: usize },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    NonFinite(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("render guard: n = {n} exceeds {limit}; use the CSV-only mode for larger patterns")]
    RenderGuard { n: usize, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            Error::Config(_) | Error::Unsupported(_) | Error::RenderGuard { .. } => 1,
            _ => 2,
        }
    }
}
