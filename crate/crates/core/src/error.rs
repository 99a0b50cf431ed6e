//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Incompatible tensor shapes fed to a primitive.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid model/run configuration (divisibility, empty level sets, bad keys, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Shape mismatch while fusing a skip connection with decoder features.
    #[error("fusion error at level {level}: {msg}")]
    Fusion { level: usize, msg: String },

    /// Malformed or inconsistent input data (masks out of range, size mismatch, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Dataset pairing violation: an image or mask file without its partner.
    #[error("ingestion error: missing {kind} for id '{id}'")]
    MissingPair { id: String, kind: &'static str },

    /// A primitive produced NaN/Inf from finite inputs, or the loss went non-finite.
    #[error("non-finite values in {context}")]
    NonFinite { context: String },

    /// Checkpoint (de)serialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    /// A metric that has no defined value for the given inputs (e.g. Hausdorff on an empty mask).
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// Pretrained-weight transfer failure.
    #[error("load error: {0}")]
    Load(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Typed failures of the binary checkpoint format. Magic, CRC and version
/// violations are distinct variants so callers can tell corruption modes apart.
#[derive(Error, Debug, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes (expected \"UCTN\")")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    BadCrc { stored: u32, computed: u32 },
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed entry: {0}")]
    Malformed(String),
}

impl Error {
    /// Process exit code convention: 1 for configuration mistakes the user can
    /// fix in the spec file or flags, 2 for runtime/numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::MissingPair { .. } | Error::Data(_) => 1,
            _ => 2,
        }
    }
}
