use std::io;

use crate::entropy::CoderError;
use crate::tensor::ShapeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error("bitstream: {0}")]
    Bitstream(String),
    #[error("section `{section}` of frame {frame}: {reason}")]
    CorruptSection {
        frame: usize,
        section: &'static str,
        reason: String,
    },
    #[error("{0}")]
    InvalidInput(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn bitstream(msg: impl Into<String>) -> Self {
        Error::Bitstream(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn parse(offset: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            reason: reason.into(),
        }
    }
}
