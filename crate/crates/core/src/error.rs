//! Crate-wide error type.

use std::path::PathBuf;

/// Every failure mode in the crate. Variants carry enough context to
/// diagnose the call site without a debugger.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("kernel too large in {op}: {detail}")]
    KernelTooLarge { op: &'static str, detail: String },

    #[error("reduction axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,

    #[error("tensor was not produced on this tape")]
    NotOnTape,

    #[error("a leaf still holds a gradient; take or clear gradients before backward")]
    GradNotCleared,

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("batch norm needs at least 2 values per channel in train mode, got {count}")]
    DegenerateBatch { count: usize },

    #[error("input spatial dims {got:?} below encoder minimum {min}")]
    InputTooSmall { got: Vec<usize>, min: usize },

    #[error("channel count {channels} not divisible by reduction ratio {ratio}")]
    BadReduction { channels: usize, ratio: usize },

    #[error("spatial attention kernel must be odd, got {kernel}")]
    EvenKernel { kernel: usize },

    #[error("modality stack is empty")]
    EmptyStack,

    #[error("need at least {needed} distinct time values, got {got}")]
    TooFewDistinctTimes { needed: usize, got: usize },

    #[error("follow-up time must be positive ({context})")]
    NonPositiveTime { context: String },

    #[error("hazard value {value} outside [0, 1]")]
    HazardOutOfRange { value: f64 },

    #[error("no comparable pairs in cohort")]
    NoComparablePairs,

    #[error("cohort is empty")]
    EmptyCohort,

    #[error("bad magic in volume file {path}")]
    BadMagic { path: PathBuf },

    #[error("truncated volume file {path}: expected {expected} bytes, got {got}")]
    TruncatedPayload { path: PathBuf, expected: usize, got: usize },

    #[error("{got} trailing bytes after volume payload in {path}")]
    TrailingBytes { path: PathBuf, got: usize },

    #[error("volume dimension {dim} exceeds the 512 limit in {path}")]
    DimOverflow { path: PathBuf, dim: u32 },

    #[error("invalid volume dims in {path}: {detail}")]
    InvalidDims { path: PathBuf, detail: String },

    #[error("manifest schema error: {0}")]
    SchemaError(String),

    #[error("missing volume file {path} (manifest row {row})")]
    MissingVolume { path: PathBuf, row: usize },

    #[error("clinical modality enabled but manifest row {row} has no clinical values")]
    MissingClinical { row: usize },

    #[error("cohort too small to split: {n} records (need at least 10)")]
    CohortTooSmall { n: usize },

    #[error("synthetic dims {dims:?} invalid: every extent must be at least 8")]
    BadDims { dims: (usize, usize, usize) },

    #[error("missing gradient for parameter {index} ({name})")]
    MissingGradient { index: usize, name: String },

    #[error("{split} split is empty")]
    EmptySplit { split: String },

    #[error("loss diverged to a non-finite value at epoch {epoch}, batch {batch}")]
    DivergedLoss { epoch: usize, batch: usize },

    #[error("unsupported checkpoint version {version}")]
    BadVersion { version: u16 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("config error: {0}")]
    ConfigError(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }
}
