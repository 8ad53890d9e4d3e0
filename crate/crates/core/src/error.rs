use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the pipeline.
///
/// The variant names double as the machine-readable error kind printed by
/// the command-line tool.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("state error: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("bounds error: {0}")]
    Bounds(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Short stable identifier of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::State(_) => "state",
            Error::Format(_) => "format",
            Error::Alignment(_) => "alignment",
            Error::Bounds(_) => "bounds",
            Error::Label(_) => "label",
            Error::Split(_) => "split",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
        }
    }
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
