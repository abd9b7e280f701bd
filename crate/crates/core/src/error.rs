use thiserror::Error;

#[derive(Debug, Error)]
pub enum KacError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("time {t} is outside the flow coverage [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KacError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(KacError::InvalidArgument(msg.into()))
}
