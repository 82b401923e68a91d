use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no series found in input")]
    NoSeries,

    #[error("only {available} complete windows available for k = {k}; lower k_max")]
    TooFewWindows { available: usize, k: usize },

    #[error("window {0} has no observed values")]
    AllMissing(String),

    #[error("projection target {0} is not a complete window")]
    IncompleteTarget(String),

    #[error("imputer `{0}` used before fit")]
    NotFitted(String),

    #[error("evaluation set has no positions to score")]
    EmptyEval,

    #[error("unknown imputer `{0}`")]
    UnknownImputer(String),

    #[error("missing artifact {}; run `dimsum {command}` first", path.display())]
    MissingArtifact {
        path: PathBuf,
        command: &'static str,
    },

    #[error(
        "artifact {} was produced by config {found}, current config is {expected}; rerun `dimsum {command}`",
        path.display()
    )]
    ConfigMismatch {
        path: PathBuf,
        found: String,
        expected: String,
        command: &'static str,
    },

    #[error("artifact {} does not match the digest recorded by `dimsum {command}`; rerun it", path.display())]
    Tampered {
        path: PathBuf,
        command: &'static str,
    },

    #[error("bridge: {0}")]
    Bridge(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by the caller's input or configuration rather than by
    /// the pipeline itself.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::Parse { .. }
                | Error::Io { .. }
                | Error::NoSeries
                | Error::TooFewWindows { .. }
                | Error::UnknownImputer(_)
                | Error::MissingArtifact { .. }
                | Error::ConfigMismatch { .. }
                | Error::Tampered { .. }
                | Error::Csv(_)
        )
    }
}
