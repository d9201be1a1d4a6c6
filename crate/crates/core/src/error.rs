use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("missing required configuration key `{0}`")]
    MissingKey(String),

    #[error("arithmetic overflow while {0}")]
    Overflow(&'static str),

    #[error("non-finite objective value (f+ = {f_plus}, f- = {f_minus})")]
    NonFinite { f_plus: f64, f_minus: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the bench binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
            Error::Numerical(_) | Error::NonFinite { .. } => 3,
            _ => 1,
        }
    }
}
