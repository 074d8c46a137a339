//! Error type shared by every module of the engine.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("partition has no blocks")]
    EmptyPartition,
    #[error("block index {index} out of range for {blocks} blocks")]
    IndexOutOfRange { index: usize, blocks: usize },
    #[error("vector of length {actual} does not match layout of dimension {expected}")]
    LayoutMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("empty sample subset")]
    EmptySubset,
    #[error("sample index {index} out of range for {n} samples")]
    SampleOutOfRange { index: usize, n: usize },
    #[error("power iteration did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("{clients} clients requested but only {samples} samples available")]
    TooManyClients { clients: usize, samples: usize },
    #[error("invalid partition spec: {0}")]
    BadPartitionSpec(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown label {label:?} at line {line}")]
    UnknownLabel { label: String, line: usize },
    #[error("invalid local configuration: {0}")]
    BadLocalConfig(String),
    #[error("unknown client {client} (federation has {clients} clients)")]
    UnknownClient { client: usize, clients: usize },
    #[error("cannot sample {sample} of {clients} clients")]
    BadSampleSize { sample: usize, clients: usize },
    #[error("{sampled} sampled clients cannot be split evenly into {blocks} blocks")]
    IndivisibleSample { sampled: usize, blocks: usize },
    #[error("missing upload in round {round}: {detail}")]
    MissingUpload { round: u32, detail: String },
    #[error("duplicate upload from client {client} (block {block}) in round {round}")]
    DuplicateUpload { client: u32, block: i32, round: u32 },
    #[error("k = {k} is invalid for a vector of length {len}")]
    BadK { k: usize, len: usize },
    #[error("quantizer needs at least one level, got {0}")]
    BadLevels(u32),
    #[error("bad frame magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("wire version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u8, found: u8 },
    #[error("truncated frame: needed {needed} bytes, have {available}")]
    TruncatedBody { needed: usize, available: usize },
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("ledger is empty")]
    EmptyLedger,
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("unknown sweep axis {0:?}")]
    UnknownAxis(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by a bad configuration rather than a failure while running.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::UnknownAxis(_)
                | Error::BadSampleSize { .. }
                | Error::IndivisibleSample { .. }
                | Error::BadLocalConfig(_)
                | Error::BadPartitionSpec(_)
                | Error::SizeMismatch(_)
                | Error::EmptyPartition
                | Error::BadK { .. }
                | Error::BadLevels(_)
                | Error::TooManyClients { .. }
        )
    }
}
