use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("variant error: {0}")]
    Variant(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("oracle disagreement: {0}")]
    Oracle(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-parseable category, used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Schedule(_) => "schedule",
            Error::Shape { .. } => "shape",
            Error::Variant(_) => "variant",
            Error::Degenerate(_) => "degenerate",
            Error::Oracle(_) => "oracle",
            Error::NonFinite(_) => "non_finite",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }

    /// Prefixes the message, keeping the category.
    pub fn context(self, prefix: impl std::fmt::Display) -> Self {
        match self {
            Error::Config(m) => Error::Config(format!("{prefix}: {m}")),
            Error::Domain(m) => Error::Domain(format!("{prefix}: {m}")),
            Error::Schedule(m) => Error::Schedule(format!("{prefix}: {m}")),
            Error::Variant(m) => Error::Variant(format!("{prefix}: {m}")),
            Error::Degenerate(m) => Error::Degenerate(format!("{prefix}: {m}")),
            Error::Oracle(m) => Error::Oracle(format!("{prefix}: {m}")),
            Error::NonFinite(m) => Error::NonFinite(format!("{prefix}: {m}")),
            Error::Format(m) => Error::Format(format!("{prefix}: {m}")),
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
