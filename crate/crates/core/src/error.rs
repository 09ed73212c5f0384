use std::io;
use std::time::Duration;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),

    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),

    #[error("cut index {cut} outside [1, {max}]")]
    CutOutOfRange { cut: usize, max: usize },

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("no client updates to aggregate")]
    EmptyUpdateSet,

    #[error("coefficient of variation undefined for zero mean")]
    ZeroMean,

    #[error("invalid cost inputs: {0}")]
    InvalidInputs(String),

    #[error("missing run: {0}")]
    MissingRun(String),

    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    DimMismatch { images: usize, labels: usize },

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("cannot split {samples} samples across {clients} clients")]
    TooManyClients { clients: usize, samples: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("payload of {0} bytes exceeds the frame limit")]
    PayloadTooLarge(usize),

    #[error("unknown message type byte {0:#04x}")]
    BadType(u8),

    #[error("frame length field says {declared} bytes but {actual} are present")]
    LengthMismatch { declared: usize, actual: usize },

    #[error("peer disconnected: {0}")]
    PeerDisconnected(String),

    #[error("timed out after {0:?}")]
    Timeout(Duration),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
