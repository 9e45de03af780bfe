use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("structural error: {0}")]
    Structure(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("fit error: {message}")]
    Fit {
        message: String,
        /// Best parameter vector reached before giving up.
        last_iterate: Vec<f64>,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("missing upstream artifact: stage `{stage}` must run first ({path})")]
    Dependency { stage: String, path: String },

    #[error("too many bootstrap failures: {failed} of {total} replicates")]
    Bootstrap {
        failed: usize,
        total: usize,
        log: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Structure(_)
            | Error::Domain(_)
            | Error::Validation(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 2,
            Error::Fit { .. }
            | Error::Numerical(_)
            | Error::Sampling(_)
            | Error::Degenerate(_)
            | Error::Bootstrap { .. } => 3,
            Error::Dependency { .. } => 4,
        }
    }

    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Structure(_) => "structure",
            Error::Domain(_) => "domain",
            Error::Fit { .. } => "fit",
            Error::Numerical(_) => "numerical",
            Error::Sampling(_) => "sampling",
            Error::Degenerate(_) => "degenerate",
            Error::Validation(_) => "validation",
            Error::Dependency { .. } => "dependency",
            Error::Bootstrap { .. } => "bootstrap",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
