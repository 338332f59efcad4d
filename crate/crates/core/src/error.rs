use thiserror::Error;

/// Error categories for the whole crate. The CLI maps these onto exit
/// codes, so variants are grouped by what the caller can do about them
/// rather than by the module that raised them.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/batch shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A parameter is outside its documented domain (non-positive
    /// temperature, epsilon out of range, bad stochastic matrix, ...).
    #[error("invalid parameter: {0}")]
    Param(String),

    /// NaN/Inf appeared, a kernel underflowed, or a loss went non-finite.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Bad or empty input data (corpus, candidate sets, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Instance too large for an exact method.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// An API contract was violated (non-scalar loss, duplicate leaf, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Run-configuration problem: unknown key, type mismatch, missing path.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
