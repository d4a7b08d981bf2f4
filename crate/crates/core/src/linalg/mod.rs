//! Dense SPD factorization, separable (Kronecker) Gaussian densities and
//! samplers, and the seedable random stream used throughout the crate.

mod cholesky;
mod rng;
mod sampling;

pub use cholesky::{cholesky, symmetrize, CholeskyFactor, SYMMETRY_TOL};
pub use rng::{derive_seed, RngStream};
pub use sampling::{
    norm_cdf, norm_quantile, sample_inverse_wishart, sample_matrix_normal,
    sample_matrix_normal_factored, sample_truncated_normal_lower, sample_truncated_normal_upper,
    separable_mvn_logpdf, standard_normal_matrix, SeparableQuadForm, TAIL_SWITCH,
};
