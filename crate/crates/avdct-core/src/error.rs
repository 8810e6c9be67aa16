//! Error types shared across the codec.

use thiserror::Error;

/// Top-level error type for the codec library.
#[derive(Debug, Error)]
pub enum CodecError {
    /// An input value or tensor violated an operation precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A parameter value is outside its legal domain (e.g. a negative threshold).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Model dimensions or session settings are inconsistent.
    #[error("configuration error: {0}")]
    Configuration(String),

    /// A recording could not be read or validated.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// A quantized coefficient does not fit a signed 32-bit integer.
    #[error("quantization overflow: {0}")]
    QuantizationOverflow(String),

    /// A serialized frame or payload is malformed.
    #[error("bitstream error: {0}")]
    Bitstream(#[from] BitstreamError),

    /// The edge-to-fog session violated the framing protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// A checkpoint container could not be loaded or validated.
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Detailed failure modes when parsing a serialized wire frame.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum BitstreamError {
    #[error("bad magic bytes (expected \"AVDC\")")]
    BadMagic,

    #[error("unsupported frame version {0}")]
    BadVersion(u8),

    #[error("truncated frame: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("payload decodes to {actual} integers, header says {expected}")]
    ElementCount { expected: usize, actual: usize },

    #[error("malformed run-length stream: {0}")]
    MalformedRun(String),

    #[error("lzma payload error: {0}")]
    Payload(String),
}

/// Detailed failure modes when loading a checkpoint container.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (expected \"AVCK\")")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    BadVersion(u8),

    #[error("truncated checkpoint: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, CodecError>;
