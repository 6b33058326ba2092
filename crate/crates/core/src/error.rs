use std::path::PathBuf;

use crate::chain::ChainError;

/// Errors produced anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("device `{0}` is already registered")]
    DuplicateDevice(String),

    #[error("unknown device `{0}`")]
    UnknownDevice(String),

    #[error("token does not belong to any registered device")]
    UnknownToken,

    #[error("probe timed out for device `{0}`")]
    ProbeTimeout(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input")]
    EmptyInput,

    #[error("training diverged: loss became non-finite at epoch {epoch}")]
    NumericalDivergence { epoch: usize },

    #[error("need {needed} committee candidates, only {available} available")]
    InsufficientCandidates { needed: usize, available: usize },

    #[error("committee member `{0}` holds no validation shard")]
    MissingShard(String),

    #[error(transparent)]
    Chain(#[from] ChainError),

    #[error("corrupt export: {0}")]
    CorruptExport(String),

    #[error("no eligible devices this round")]
    NoEligibleDevices,

    #[error("every submitted update was rejected")]
    AllUpdatesRejected,

    #[error("round {round}: {source}")]
    Round {
        round: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
