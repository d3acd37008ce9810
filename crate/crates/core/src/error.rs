use thiserror::Error;

/// Errors produced anywhere in the localization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("out of range: {0}")]
    Range(String),
    #[error("no raster coverage: {0}")]
    Coverage(String),
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    Numeric(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("dataset contains no valid records")]
    EmptyDataset,
    #[error("insufficient data: need {needed}, have {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("sample stream exhausted")]
    EndOfData,
    #[error("region contains no cells")]
    EmptyRegion,
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by the filesystem rather than by bad input.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
