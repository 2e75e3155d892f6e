use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or world parameters.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed input such as an out-of-range token.
    #[error("input error: {0}")]
    Input(String),
    /// Exact enumeration would exceed the configured cap.
    #[error("oracle unavailable: {count} responses exceed enumeration cap {cap}")]
    OracleUnavailable { count: u128, cap: u64 },
    /// A loss, ratio or gradient became non-finite.
    #[error("training error in {stage} at step {step}: {message}")]
    Training {
        stage: &'static str,
        step: usize,
        message: String,
    },
    /// Log-ratio reward undefined because a snapshot assigns zero probability.
    #[error("non-finite reward: {0}")]
    NonFiniteReward(String),
    /// Internal invariant broken (e.g. trajectory longer than the horizon).
    #[error("invariant violation: {0}")]
    Invariant(String),
    /// Required run artifacts are absent.
    #[error("missing artifacts: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingArtifacts(Vec<PathBuf>),
    /// Runs over different worlds cannot be compared.
    #[error("world specs differ: {}", .0.join("; "))]
    WorldMismatch(Vec<String>),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn training(stage: &'static str, step: usize, message: impl Into<String>) -> Self {
        Error::Training {
            stage,
            step,
            message: message.into(),
        }
    }
}
