//! Scalable MCMC sampling for low-rank nonsymmetric determinantal point
//! processes.

pub mod error;
pub mod experiments;
pub mod kernel;
mod linalg;
pub mod oracle;
pub mod samplers;
pub mod spectral;
pub mod tree;
pub mod validate;

pub use error::{NdppError, Result};
pub use kernel::{build_kernel, synth_kernel, ConditionalInner, LowRankKernel};
pub use linalg::{EPS_EIG, EPS_INV, EPS_LIN};
pub use oracle::{
    exact_kndpp_table, exact_ndpp_table, kappa_bound, psrf, tv_distance, ExactTable, SubsetCounts,
};
pub use samplers::{
    default_t_iter, greedy_map, mcmc_kndpp, mcmc_ndpp, tree_kdpp_sample, up_operator, ChainConfig,
    InitPolicy, NdppConfig, Prepared, SampleReport,
};
pub use spectral::{
    elementary_symmetric, nonzero_eigvals, youla_decompose, ElemSymTable, NdppSpectrum,
    YoulaFactors,
};
pub use tree::{build_tree, SampleTree};
