use std::fmt;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    Argument { op: &'static str, detail: String },

    #[error("empty attention support")]
    EmptyAttentionSupport,

    #[error("empty utterance")]
    EmptyUtterance,

    #[error("empty canary timeline")]
    EmptyCanaryTimeline,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error in {context}: {detail}")]
    Format { context: String, detail: String },

    #[error("data error{}: {detail}", RowSuffix(*row))]
    Data { row: Option<usize>, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct RowSuffix(Option<usize>);

impl fmt::Display for RowSuffix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(row) => write!(f, " at row {row}"),
            None => Ok(()),
        }
    }
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Argument { op, detail: detail.into() }
    }

    pub fn data(detail: impl Into<String>) -> Self {
        Error::Data { row: None, detail: detail.into() }
    }

    pub fn data_at(row: usize, detail: impl Into<String>) -> Self {
        Error::Data { row: Some(row), detail: detail.into() }
    }

    pub fn format(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { context: context.into(), detail: detail.into() }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Format { .. } | Error::Data { .. } => ErrorClass::Data,
            Error::Io(_) => ErrorClass::Io,
            Error::Dimension { .. }
            | Error::Argument { .. }
            | Error::EmptyAttentionSupport
            | Error::EmptyUtterance
            | Error::EmptyCanaryTimeline
            | Error::NonFinite(_) => ErrorClass::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
