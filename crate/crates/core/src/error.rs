use thiserror::Error;

/// Errors produced anywhere in the reconstruction toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Range(String),
    #[error("scan has no views")]
    EmptyScan,
    #[error("operation requires a short scan")]
    NotShortScan,
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid phantom specification: {0}")]
    Spec(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("metric undefined: {0}")]
    MetricUndefined(String),
    #[error("degenerate histogram: all values equal")]
    DegenerateHistogram,
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 4,
            _ => 3,
        }
    }
}
