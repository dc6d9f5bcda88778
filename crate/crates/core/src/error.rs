use std::path::PathBuf;

use crate::unet::ChannelId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        dim: String,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{0}: non-finite value encountered")]
    NonFinite(&'static str),

    #[error("backward already ran on this graph; rebuild the forward pass first")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid architecture: {0}")]
    InvalidSpec(String),

    #[error("cannot remove the last channel of conv ({}, {})", .0.block, .0.conv)]
    LastChannel(ChannelId),

    #[error("no prunable channel left")]
    Exhausted,

    #[error("channel ({}, {}, {}) is out of range", .0.block, .0.conv, .0.channel)]
    NoSuchChannel(ChannelId),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("toml: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        dim: impl Into<String>,
        expected: usize,
        got: usize,
    ) -> Self {
        Error::Shape {
            op,
            dim: dim.into(),
            expected,
            got,
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
