use thiserror::Error;

use crate::io::FormatError;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid attention mask: {0}")]
    InvalidMask(String),

    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid adversary geometry: {0}")]
    InvalidGeometry(String),

    /// The required mask extent does not leave any patch visible, or does not
    /// fit the patch grid at all.
    #[error("patch too large to certify with this backbone: {0}")]
    Uncertifiable(String),

    #[error("placement out of bounds: {0}")]
    OutOfBounds(String),

    #[error("images differ outside an admissible patch region: {0}")]
    NotAdmissible(String),

    #[error("label {label} is outside 0..{classes}")]
    Label { label: usize, classes: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("weight store does not match configuration: {0}")]
    Weights(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for the geometry failures an operator should see as "cannot
    /// certify" rather than as a usage error.
    pub fn is_geometry(&self) -> bool {
        matches!(self, Error::Uncertifiable(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
