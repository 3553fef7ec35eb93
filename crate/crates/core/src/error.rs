use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: value {value} outside the function domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{what}: index {index} out of range 0..{len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("covariance is rank deficient: eigenvalue {dim} is {value:e}")]
    RankDeficient { dim: usize, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
