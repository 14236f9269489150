use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },

    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGrad(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("{what} = {value} is out of range ({allowed})")]
    OutOfRange {
        what: &'static str,
        value: String,
        allowed: &'static str,
    },

    #[error("invalid pruning plan: {0}")]
    InvalidPlan(String),

    #[error("invalid keep-set for layer `{layer}`: {reason}")]
    InvalidKeepSet { layer: String, reason: String },

    #[error(
        "FLOP target {target:.4} unreachable within integer constraints; nearest achievable is {nearest:.4}"
    )]
    BudgetUnreachable { target: f64, nearest: f64 },

    #[error("invalid task spec `{task}`: {reason}")]
    InvalidTask { task: String, reason: String },

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("budget {budget:e} outside curve range [{lo:e}, {hi:e}]")]
    BudgetOutOfRange { budget: f64, lo: f64, hi: f64 },

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Errors caused by bad inputs or configuration rather than by a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidSpec(_)
                | Error::OutOfRange { .. }
                | Error::InvalidPlan(_)
                | Error::InvalidKeepSet { .. }
                | Error::BudgetUnreachable { .. }
                | Error::InvalidTask { .. }
                | Error::LabelOutOfRange { .. }
                | Error::Config(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("IDX file truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("IDX count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("embedded architecture is invalid: {0}")]
    BadArchitecture(String),
    #[error("tensor `{name}` has dims {found:?}, architecture expects {expected:?}")]
    DimMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint holds {found} tensors, architecture expects {expected}")]
    ParamCount { found: usize, expected: usize },
    #[error("unexpected tensor `{0}` in checkpoint")]
    UnknownTensor(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("[{section}] unknown key `{key}`")]
    UnknownKey { section: String, key: String },
    #[error("[{section}] missing required key `{key}`")]
    MissingKey { section: String, key: String },
    #[error("[{section}] `{key}`: type mismatch: {reason}")]
    TypeMismatch { section: String, key: String, reason: String },
    #[error("[{section}] `{key}`: {reason}")]
    Invalid {
        section: String,
        key: String,
        reason: String,
    },
    #[error("[{section}] `{key}` references missing file {path}")]
    MissingFile {
        section: String,
        key: String,
        path: String,
    },
    #[error("[{section}] `{key}` references unknown {what} `{name}`")]
    BadReference {
        section: String,
        key: String,
        what: &'static str,
        name: String,
    },
    #[error("syntax error: {0}")]
    Syntax(String),
}
