use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Tensor axis named in shape errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Batch,
    Channel,
    Height,
    Width,
    Rank,
    Dim(usize),
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::Batch => f.write_str("batch"),
            Axis::Channel => f.write_str("channel"),
            Axis::Height => f.write_str("height"),
            Axis::Width => f.write_str("width"),
            Axis::Rank => f.write_str("rank"),
            Axis::Dim(d) => write!(f, "dim {d}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("{op}: {axis} mismatch (expected {expected}, found {found})")]
    Mismatch {
        op: &'static str,
        axis: Axis,
        expected: usize,
        found: usize,
    },
    #[error("{op}: {axis} extent {extent} too small for kernel {kernel} with padding {padding}")]
    TooSmall {
        op: &'static str,
        axis: Axis,
        extent: usize,
        kernel: usize,
        padding: usize,
    },
    #[error("{op}: {axis} extent {extent} must be even")]
    Odd {
        op: &'static str,
        axis: Axis,
        extent: usize,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    Length {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: invalid argument: {msg}")]
    Argument { op: &'static str, msg: String },
}

/// Checkpoint load/save failures. Loading never returns a partially built model.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}")]
    Magic { found: [u8; 4] },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("unknown tensor name {0:?}")]
    UnknownTensor(String),
    #[error("tensor {name:?}: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unsupported dtype code {0}")]
    Dtype(u8),
    #[error("checkpoint is missing tensor {0:?}")]
    Missing(String),
    #[error("variant mismatch: checkpoint holds {found}, expected {expected}")]
    Variant { expected: String, found: String },
    #[error("invalid UTF-8 in tensor name")]
    Utf8,
    #[error("trailing bytes after last tensor")]
    Trailing,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Annotation parse failures, always carrying the file and the element at fault.
#[derive(Debug, Error)]
#[error("{}: <{element}>: {msg}", file.display())]
pub struct VocError {
    pub file: PathBuf,
    pub element: String,
    pub msg: String,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Voc(#[from] VocError),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch} step {step}: loss is {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn spec_err(msg: impl Into<String>) -> Error {
    Error::Spec(msg.into())
}
