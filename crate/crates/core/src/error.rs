//! Crate-wide error type.

use thiserror::Error;

/// Errors reported by the model, data, selection, codec, and simulator layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("model spec needs at least 2 layer sizes, got {0}")]
    TooFewLayers(usize),

    #[error("layer sizes must all be >= 1")]
    ZeroLayerSize,

    #[error("{what}: expected length {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: u32 },

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("dataset has no rows")]
    EmptyDataset,

    #[error("noise fraction {0} outside [0, 1]")]
    InvalidNoise(f64),

    #[error("cannot split {m} samples across {k} workers")]
    TooManyWorkers { k: usize, m: usize },

    #[error("batch size {batch} exceeds shard size {shard}")]
    BatchTooLarge { batch: usize, shard: usize },

    #[error("csv parse error at line {line}: {msg}")]
    CsvParse { line: usize, msg: String },

    #[error("magnitude array holds a negative entry at index {index}")]
    NegativeMagnitude { index: usize },

    #[error("explorer indices overlap the core")]
    ExplorerOverlapsCore,

    #[error("sparse indices must be sorted and unique (offender: {index})")]
    UnsortedOrDuplicateIndex { index: u32 },

    #[error("index {index} out of range for n = {n}")]
    IndexOutOfRange { index: u32, n: u32 },

    #[error("stale core cache: frame signature {frame:#018x} does not match cached {cached:#018x}")]
    SignatureMismatch { cached: u64, frame: u64 },

    #[error("stale core cache: frame epoch {frame} does not match cached {cached}")]
    EpochMismatch { cached: u32, frame: u32 },

    #[error("{what}: payload length {got} does not match declared {expected}")]
    PayloadLength {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("expected a {expected} frame, got {got}")]
    FrameKindMismatch {
        expected: &'static str,
        got: &'static str,
    },

    #[error("truncated frame: {what}")]
    Truncated { what: &'static str },

    #[error("invalid quantization parameters: {0}")]
    InvalidQuantParams(String),

    #[error("synchronous barrier violated: missing frames from worker {worker}")]
    MissingWorkerFrames { worker: usize },

    #[error("frame for round {got} arrived while applying round {expected}")]
    RoundMismatch { expected: u32, got: u32 },

    #[error("core selection requested before any full push cached update magnitudes")]
    MissingGradientCache,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
