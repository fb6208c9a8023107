use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    Numeric { op: String },

    #[error("input too short: {0}")]
    Length(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("coverage error: missing {} utterance(s): {}", .missing.len(), .missing.join(", "))]
    Coverage { missing: Vec<String> },

    #[error("fold error: {0}")]
    Fold(String),

    #[error("empty utterance: no valid frames")]
    EmptyUtterance,

    #[error("input error: {0}")]
    Input(String),

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("parse error in {path} at {record}: {message}")]
    Parse {
        path: PathBuf,
        record: String,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dimension { .. } => "dimension",
            Error::Numeric { .. } => "numeric",
            Error::Length(_) => "length",
            Error::Label(_) => "label",
            Error::Coverage { .. } => "coverage",
            Error::Fold(_) => "fold",
            Error::EmptyUtterance => "empty_utterance",
            Error::Input(_) => "input",
            Error::Provenance(_) => "provenance",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        path: impl Into<PathBuf>,
        record: impl Into<String>,
        message: impl std::fmt::Display,
    ) -> Self {
        Error::Parse {
            path: path.into(),
            record: record.into(),
            message: message.to_string(),
        }
    }
}
