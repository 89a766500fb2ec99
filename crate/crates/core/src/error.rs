use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid convolution: {0}")]
    InvalidConv(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("binarizer input {0} outside [-1, 1]")]
    BinarizerRange(f64),
    #[error("backward requires a train-mode forward pass")]
    NotTrainMode,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("iteration count {got} outside [{min}, {max}]")]
    IterationsOutOfRange { got: usize, min: usize, max: usize },
    #[error("non-finite loss {loss} at step {step} (lr {lr})")]
    NonFiniteLoss { loss: f64, step: u64, lr: f64 },
    #[error("byte budget {budget} below the minimum of {minimum} bytes")]
    BudgetTooSmall { budget: usize, minimum: usize },
    #[error("dataset has no usable images ({rejected} rejected, {unreadable} unreadable)")]
    EmptyDataset { rejected: usize, unreadable: usize },
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u8),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint shape mismatch for parameter {name}: file {file:?}, model {model:?}")]
    ShapeMismatch { name: String, file: Vec<usize>, model: Vec<usize> },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum BitstreamError {
    #[error("bad magic")]
    BadMagic,
    #[error("unknown bitstream version {0}")]
    UnknownVersion(u8),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("short payload in patch {patch}")]
    ShortPayload { patch: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("nonzero padding bits in patch {patch}")]
    NonZeroPadding { patch: usize },
    #[error("model mismatch: stream fingerprint {stream:016x}, model {model:016x}")]
    ModelMismatch { stream: u64, model: u64 },
}
