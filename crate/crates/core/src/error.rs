use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NfmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NfmError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid quadrature order {0}: must be even and >= 2")]
    InvalidOrder(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("time {t} exceeds model horizon tau = {tau}")]
    Horizon { t: f64, tau: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("parse error at row {row}, column '{column}': {msg}")]
    Parse {
        row: usize,
        column: String,
        msg: String,
    },

    #[error("dataset too small: n = {n}, need at least {needed}")]
    TooSmall { n: usize, needed: usize },

    #[error("no comparable pairs for concordance")]
    NoComparablePairs,

    #[error("censoring calibration failed: {0}")]
    NonBracketing(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<NfmError>,
    },

    #[error("cross-validation repeat {repeat}, fold {fold}: {source}")]
    Fold {
        repeat: usize,
        fold: usize,
        #[source]
        source: Box<NfmError>,
    },
}

impl NfmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NfmError::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            NfmError::Io { .. } | NfmError::Csv { .. } | NfmError::Json { .. } => ErrorCategory::Io,
            NfmError::Config(_) => ErrorCategory::Config,
            NfmError::Dataset(_)
            | NfmError::Parse { .. }
            | NfmError::TooSmall { .. }
            | NfmError::NoComparablePairs => ErrorCategory::Data,
            NfmError::Training { source, .. } | NfmError::Fold { source, .. } => source.category(),
            _ => ErrorCategory::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Data,
    Numerical,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Io => 3,
            ErrorCategory::Data => 4,
            ErrorCategory::Numerical => 5,
        }
    }
}
