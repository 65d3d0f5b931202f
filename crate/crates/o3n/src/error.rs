use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed container: {0}")]
    MalformedContainer(String),

    #[error("dimension error: {0}")]
    DimensionError(String),

    #[error("config error: {0}")]
    ConfigError(String),

    #[error("video too short: need {needed} frames, have {actual}")]
    VideoTooShort { needed: usize, actual: usize },

    #[error("shape error: {0}")]
    ShapeError(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
