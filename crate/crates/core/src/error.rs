use std::io;

use thiserror::Error;

pub type Result<T, E = NdppError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NdppError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A principal minor came out more negative than the roundoff floor allows.
    #[error("negative determinant {value:e} for subset {subset:?} (tolerance {tol:e})")]
    NegativeDeterminant {
        subset: Vec<usize>,
        value: f64,
        tol: f64,
    },

    /// `X_A W X_Aᵀ` is numerically singular; the conditioning set has zero probability.
    #[error("singular conditioning set {subset:?} (reciprocal condition {rcond:e})")]
    SingularConditioning { subset: Vec<usize>, rcond: f64 },

    #[error("matrix is not skew-symmetric (max |M + Mᵀ| = {0:e})")]
    NotSkew(f64),

    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("spectrum is not that of a valid NDPP kernel: {0}")]
    InvalidSpectrum(String),

    #[error("distribution has no support: {0}")]
    NoSupport(String),

    #[error("rejection limit of {limit} exceeded (κ-based expected trials bound: {bound})")]
    TooManyRejections { limit: u64, bound: String },

    #[error("enumeration budget exceeded: {needed} > {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },

    #[error("chain initialization failed after {0} attempts")]
    InitFailed(usize),

    #[error("kernel format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
