use alloc::string::String;

/// Errors shared by every module of the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("class index {index} out of range for {limit} classes")]
    ClassOutOfRange { index: u32, limit: u32 },
    #[error("activation {0} is not a valid bit value")]
    InvalidActivation(f64),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: [usize; 4], got: [usize; 4] },
    #[error("{0} masks exceed palette capacity {1}")]
    Capacity(usize, usize),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
