use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid material `{name}`: radiation length {radiation_length} cm must be positive")]
    InvalidMaterial { name: String, radiation_length: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no data: {0}")]
    NoData(String),

    #[error("dataset format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
