use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero dimension")]
    ZeroDim(Vec<usize>),
    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("unknown graph leaf `{0}`")]
    UnknownLeaf(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported image size {size}; supported sizes are {supported:?}")]
    UnsupportedImageSize { size: usize, supported: &'static [usize] },
    #[error("layer count {requested} out of range 1..={available}")]
    LayerCount { requested: usize, available: usize },
    #[error("width mismatch in layer {layer}: expected {expected}, got {actual}")]
    WidthMismatch {
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("extractor fingerprint mismatch: stats {stats:016x}, extractor {extractor:016x}")]
    Fingerprint { stats: u64, extractor: u64 },
    #[error("empty dataset")]
    EmptyData,
    #[error("batch of {0} samples is too small for variance matching (need at least 2)")]
    BatchTooSmall(usize),
    #[error("training diverged at step {step}; last finite loss {last_finite:?}")]
    Diverged { step: u64, last_finite: Option<f64> },
    #[error("matrix square root did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("observer failed: {0}")]
    Observer(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
