use std::io;

use thiserror::Error;

/// Errors produced by tensor, layer and pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on {axis}: expected {expected}, got {got}")]
    Shape {
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("saliency measure {0} requires weight gradients")]
    MissingGradient(&'static str),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(axis: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            axis,
            expected,
            got,
        });
    }
    Ok(())
}
