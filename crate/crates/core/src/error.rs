use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, flags or manifest schema.
    #[error("config: {0}")]
    Config(String),

    #[error("schema: key `{key}`: {msg}")]
    Schema { key: String, msg: String },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse: {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("label {label} out of range [0, {n_classes}) at row {row}")]
    Label {
        row: usize,
        label: i64,
        n_classes: usize,
    },

    /// Target rows found among the source rows of a fold.
    #[error("leakage: {0}")]
    Leakage(String),

    /// Numerical failure during training, e.g. a NaN loss term.
    #[error("numeric: {0}")]
    Numeric(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn schema(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Schema {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, also used to pick the process exit code.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Schema { .. } => "config",
            Error::Numeric(_) => "numeric",
            _ => "data",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "numeric" => 4,
            _ => 3,
        }
    }
}
