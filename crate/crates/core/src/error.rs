use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),
    #[error("input vector is not unit length (norm {0})")]
    NotUnit(f64),
    #[error("degree {0} exceeds the supported ceiling of {max}", max = crate::specfun::MAX_DEGREE)]
    DegreeTooHigh(usize),
    #[error("unknown group or structure `{0}`")]
    Unknown(String),
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("autodiff: {0}")]
    Tape(String),
    #[error("ill-conditioned: {0}")]
    Conditioning(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
