use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} index {index} out of range (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("coincident positions: PA-user distance is {0} m")]
    SingularDistance(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("waveguide {waveguide} of BS {bs} is assigned to more than one user")]
    NonInjective { bs: usize, waveguide: usize },

    #[error("BS {bs} has {waveguides} waveguides but {users} users need one each")]
    TooManyUsers {
        bs: usize,
        users: usize,
        waveguides: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn index_check(what: &'static str, index: usize, len: usize) -> Result<()> {
    if index < len {
        Ok(())
    } else {
        Err(Error::Index { what, index, len })
    }
}
