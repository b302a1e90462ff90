use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalise a zero vector (norm {0:e})")]
    ZeroVector(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range for size {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("query {0} has no positive in its database")]
    NoPositives(usize),
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("no class has at least {0} examples")]
    EmptyAfterFilter(usize),
    #[error("batch size {batch} is not divisible by samples per class {per_class}")]
    NotDivisible { batch: usize, per_class: usize },
    #[error("need {needed} classes, only {available} available")]
    TooFewClasses { needed: usize, available: usize },
    #[error("backward pass requires activations retained by forward")]
    ActivationsMissing,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at iteration {0}")]
    Diverged(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
