use thiserror::Error;

/// Errors produced anywhere in the codec.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("weight error: {0}")]
    Weights(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("unsupported version: {0}")]
    Version(String),
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error("model mismatch: stream expects weights {expected:016x}, loaded {actual:016x}")]
    ModelMismatch { expected: u64, actual: u64 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("encode error: {0}")]
    Encode(String),
    #[error("probability model error: {0}")]
    Model(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
