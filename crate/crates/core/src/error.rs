use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric fault at tape node {node} ({op}): {detail}")]
    NumericFault {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("function is not deterministic: {0}")]
    Determinism(String),

    #[error("missing dataset file {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("{file}:{line}: malformed dataset: {msg}")]
    Malformed {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training fault in {phase} phase at epoch {epoch}: {detail}")]
    TrainingFault {
        phase: &'static str,
        epoch: usize,
        detail: String,
    },

    #[error("phase-order error: {0}")]
    PhaseOrder(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("seed {seed}, {phase} phase: {source}")]
    InSeed {
        seed: u64,
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_seed(self, seed: u64, phase: &'static str) -> Self {
        Error::InSeed {
            seed,
            phase,
            source: Box::new(self),
        }
    }

    /// Process exit code for this error class.
    ///
    /// 2 parse/ingestion, 3 configuration, 4 phase order, 5 numeric fault,
    /// 6 undefined metric, 7 contract violation, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingFile { .. } | Error::Parse { .. } | Error::Malformed { .. } => 2,
            Error::Config(_) => 3,
            Error::PhaseOrder(_) | Error::Checkpoint { .. } => 4,
            Error::NumericFault { .. } | Error::TrainingFault { .. } => 5,
            Error::UndefinedMetric(_) => 6,
            Error::Contract(_) | Error::Determinism(_) => 7,
            Error::Io { .. } => 1,
            Error::InSeed { source, .. } => source.exit_code(),
        }
    }
}
