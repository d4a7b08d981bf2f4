//! Adaptive Metropolis-within-Gibbs sampler with data augmentation of the
//! censored responses.
//!
//! One iteration runs, in order: truncated-normal imputation of censored
//! cells, the conjugate β and Σ updates, the latent field update, logit
//! random-walk steps for the range φ and the ratio r, and (during burn-in)
//! step-size adaptation.

mod chain;
mod config;
mod kernels;
mod state;

pub use chain::{
    run_chain, snapshot, ChainDiagnostics, ChainOutput, Draw, InitialValues, ParamSummary,
    PosteriorSamples,
};
pub use config::{McmcConfig, STEP_SD_MAX, STEP_SD_MIN};
pub use kernels::{
    adapt_steps, adapted_sd, beta_conditional, epsilon_conditional, impute_censored,
    imputation_conditional, log_ratio_phi, log_ratio_r, sigma_conditional, sweep, update_beta,
    update_epsilon, update_phi, update_r, update_sigma, NuggetConditional,
};
pub use state::{factor_correlation, ChainState, ModelContext, SpatialCache, CORR_JITTER};
