use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {layer}: {msg}")]
    Shape { layer: String, msg: String },

    #[error("odd crop difference at {layer}: {from} -> {to}")]
    OddCrop { layer: String, from: usize, to: usize },

    #[error("non-positive extent at {layer}: input extent {input} smaller than required {required}")]
    NegativeExtent { layer: String, input: usize, required: usize },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { expected: u16, found: u16 },

    #[error("config hash mismatch: file has {found:016x}, expected {expected:016x}")]
    ConfigHashMismatch { expected: u64, found: u64 },

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, iteration {iteration}: loss {loss}")]
    Diverged { epoch: usize, iteration: u64, loss: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn shape(layer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape { layer: layer.into(), msg: msg.into() }
    }
}

/// Map an unexpected-EOF io error into [`Error::TruncatedFile`].
pub(crate) fn truncated(what: &str) -> impl Fn(io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::TruncatedFile(what.to_string())
        } else {
            Error::Io(e)
        }
    }
}
