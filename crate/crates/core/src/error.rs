use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("bad magic {found:?} (expected \"CPTF\")")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),

    #[error("unsupported dtype code {0} (only 2 = float64 is implemented)")]
    UnsupportedDtype(u8),

    #[error("unsupported rank {0} (containers hold 4D tensors)")]
    UnsupportedRank(u8),

    #[error("payload length mismatch: header implies {expected} bytes, found {found}")]
    LengthMismatch { expected: u64, found: u64 },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),

    #[error("grid spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("index ({t}, {x}, {y}, {v}) out of range for dims {dims:?}")]
    IndexOutOfRange {
        t: usize,
        x: usize,
        y: usize,
        v: usize,
        dims: [usize; 4],
    },

    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("alpha grid must be non-empty and strictly increasing")]
    InvalidAlphaGrid,

    #[error("strategy mismatch: expected {expected}, found {found}")]
    StrategyMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("negative sigma {value} at flat index {index}")]
    NegativeSigma { index: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("mixed alpha values: {0} and {1}")]
    MixedAlpha(f64, f64),

    #[error("{0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
