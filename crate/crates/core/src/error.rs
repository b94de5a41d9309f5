use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("duplicate cell_id `{0}`")]
    DuplicateCell(String),

    #[error("{0}")]
    Schema(String),

    #[error("{0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    State(String),

    #[error("optimizer: {0}")]
    Optimizer(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used in CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::MissingColumn(_) | Error::Schema(_) => "schema",
            Error::Parse { .. } | Error::Csv(_) => "parse",
            Error::DuplicateCell(_) => "uniqueness",
            Error::Domain(_) => "domain",
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Optimizer(_) => "optimizer",
            Error::NonFiniteLoss { .. } => "training",
            Error::Degenerate(_) => "degenerate",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// Whether the error stems from invalid user input rather than a failure
    /// during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn(_)
                | Error::Schema(_)
                | Error::Parse { .. }
                | Error::Csv(_)
                | Error::DuplicateCell(_)
                | Error::Config(_)
                | Error::Json(_)
        )
    }
}
