use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the pipeline.
///
/// [`Error::category`] groups them into the three families the command-line
/// front end reports (`config`, `data`, `numeric`) plus plain I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scale: max {max} must exceed min {min}")]
    InvalidScale { min: f64, max: f64 },

    #[error("value {value} outside [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("degenerate similarity scale: sigma = {0} (all labels identical?)")]
    DegenerateSigma(f64),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("insufficient pool: need {needed} candidate images, have {available}")]
    InsufficientPool { needed: usize, available: usize },

    #[error("invalid pair policy: {0}")]
    InvalidPolicy(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dangling reference: {modality} id `{id}` not present")]
    DanglingReference { modality: &'static str, id: String },

    #[error("duplicate {modality} id `{id}`")]
    DuplicateId { modality: &'static str, id: String },

    #[error("split overlap: {modality} id `{id}` appears in {first} and {second}")]
    SplitOverlap {
        modality: &'static str,
        id: String,
        first: &'static str,
        second: &'static str,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch for tensor `{tensor}`: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("batch norm in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("non-finite gradient in {tensor} (network `{network}`, entry {index})")]
    NonFiniteGradient {
        network: String,
        tensor: String,
        index: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("invalid index: {0}")]
    InvalidIndex(String),

    #[error("missing loss term `{0}`")]
    MissingTerm(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error family used for exit codes and message prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Io,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Io => "io",
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            Config(_) | InvalidPolicy(_) | InvalidScale { .. } | InfeasibleSplit(_) => {
                ErrorCategory::Config
            }
            OutOfRange { .. }
            | EmptyCorpus(_)
            | InsufficientPool { .. }
            | Parse { .. }
            | DanglingReference { .. }
            | DuplicateId { .. }
            | SplitOverlap { .. }
            | DimensionMismatch { .. }
            | ShapeMismatch { .. }
            | Checkpoint(_)
            | InvalidIndex(_)
            | MissingTerm(_)
            | BatchTooSmall(_)
            | StaleCache(_) => ErrorCategory::Data,
            DegenerateSigma(_) | NonFiniteGradient { .. } | NonFinite(_) | NonFiniteLoss { .. } => {
                ErrorCategory::Numeric
            }
            Io { .. } => ErrorCategory::Io,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
