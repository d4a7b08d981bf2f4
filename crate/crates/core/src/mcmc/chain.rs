use nalgebra::DMatrix;

use super::config::McmcConfig;
use super::kernels::sweep;
use super::state::{ChainState, ModelContext};
use crate::metrics::{quantile_sorted, sample_mean_sd};
use crate::model::{LatentState, ModelParams};
use crate::linalg::RngStream;
use crate::Result;

/// One stored (thinned, post-burn-in) state.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub iteration: usize,
    pub beta: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub phi: f64,
    pub r: f64,
    pub imputed: Vec<f64>,
    pub epsilon: Option<DMatrix<f64>>,
    pub accepted_phi: bool,
    pub accepted_r: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub draws: Vec<Draw>,
    pub censored_cells: Vec<(usize, usize)>,
    pub variable_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainDiagnostics {
    /// Acceptance rates over the post-burn-in iterations.
    pub accept_rate_phi: f64,
    pub accept_rate_r: f64,
    pub step_sd_phi: f64,
    pub step_sd_r: f64,
    pub n_iter: usize,
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub samples: PosteriorSamples,
    pub diagnostics: ChainDiagnostics,
}

/// Optional explicit starting point; the default initializer is used otherwise.
#[derive(Debug, Clone)]
pub struct InitialValues {
    pub params: ModelParams,
    pub latent: LatentState,
}

/// Runs the adaptive Metropolis-within-Gibbs sampler and keeps every
/// `thin`-th post-burn-in state.
pub fn run_chain(
    ctx: &ModelContext<'_>,
    config: &McmcConfig,
    init: Option<InitialValues>,
) -> Result<ChainOutput> {
    config.validate()?;
    let mut state = match init {
        Some(iv) => ChainState::new(ctx, iv.params, iv.latent, config.initial_step_sd, RngStream::new(config.seed))?,
        None => ChainState::initialize(ctx, config)?,
    };
    let mut draws = Vec::with_capacity(config.n_stored());
    let (mut acc_phi, mut acc_r) = (0usize, 0usize);
    for _ in 0..config.n_iter {
        sweep(&mut state, ctx, config)?;
        let it = state.iteration;
        if it > config.burn_in {
            acc_phi += state.accepted_phi as usize;
            acc_r += state.accepted_r as usize;
            if (it - config.burn_in).is_multiple_of(config.thin) {
                draws.push(snapshot(&state, config.store_epsilon));
            }
        }
        if it % 10_000 == 0 {
            log::debug!("iteration {it}: phi = {:.4}, r = {:.4}", state.params.phi, state.params.r);
        }
    }
    let post = (config.n_iter - config.burn_in) as f64;
    Ok(ChainOutput {
        samples: PosteriorSamples {
            draws,
            censored_cells: ctx.cells.clone(),
            variable_names: ctx.data.variable_names.clone(),
        },
        diagnostics: ChainDiagnostics {
            accept_rate_phi: acc_phi as f64 / post,
            accept_rate_r: acc_r as f64 / post,
            step_sd_phi: state.step_sd_phi,
            step_sd_r: state.step_sd_r,
            n_iter: config.n_iter,
        },
    })
}

pub fn snapshot(state: &ChainState, with_epsilon: bool) -> Draw {
    Draw {
        iteration: state.iteration,
        beta: state.params.beta.clone(),
        sigma: state.params.sigma.clone(),
        phi: state.params.phi,
        r: state.params.r,
        imputed: state.latent.imputed.clone(),
        epsilon: with_epsilon.then(|| state.latent.epsilon.clone()),
        accepted_phi: state.accepted_phi,
        accepted_r: state.accepted_r,
    }
}

/// Posterior mean, sd, and 2.5% / 97.5% quantiles of one scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

impl PosteriorSamples {
    /// Scalar parameter series in reporting order: `beta_{p,q}` grouped by
    /// covariate, `Sigma_{i,i}`, then `Sigma_{i,j}` (i < j), `phi`, `r`.
    pub fn parameter_series(&self) -> Vec<(String, Vec<f64>)> {
        let Some(first) = self.draws.first() else {
            return Vec::new();
        };
        let (q, p) = first.beta.shape();
        let mut out = Vec::new();
        for c in 0..q {
            for v in 0..p {
                out.push((format!("beta_{},{}", v + 1, c + 1), self.draws.iter().map(|d| d.beta[(c, v)]).collect()));
            }
        }
        for v in 0..p {
            out.push((format!("Sigma_{},{}", v + 1, v + 1), self.draws.iter().map(|d| d.sigma[(v, v)]).collect()));
        }
        for i in 0..p {
            for j in (i + 1)..p {
                out.push((format!("Sigma_{},{}", i + 1, j + 1), self.draws.iter().map(|d| d.sigma[(i, j)]).collect()));
            }
        }
        out.push(("phi".into(), self.draws.iter().map(|d| d.phi).collect()));
        out.push(("r".into(), self.draws.iter().map(|d| d.r).collect()));
        out
    }

    pub fn summary(&self) -> Vec<ParamSummary> {
        self.parameter_series()
            .into_iter()
            .map(|(name, mut xs)| {
                let (mean, sd) = sample_mean_sd(&xs);
                xs.sort_by(f64::total_cmp);
                ParamSummary {
                    name,
                    mean,
                    sd,
                    q025: quantile_sorted(&xs, 0.025),
                    q975: quantile_sorted(&xs, 0.975),
                }
            })
            .collect()
    }

    pub fn posterior_mean_beta(&self) -> DMatrix<f64> {
        mean_matrix(self.draws.iter().map(|d| &d.beta))
    }

    pub fn posterior_mean_sigma(&self) -> DMatrix<f64> {
        mean_matrix(self.draws.iter().map(|d| &d.sigma))
    }

    pub fn posterior_mean_phi(&self) -> f64 {
        self.draws.iter().map(|d| d.phi).sum::<f64>() / self.draws.len() as f64
    }

    pub fn posterior_mean_r(&self) -> f64 {
        self.draws.iter().map(|d| d.r).sum::<f64>() / self.draws.len() as f64
    }
}

fn mean_matrix<'a>(mut it: impl Iterator<Item = &'a DMatrix<f64>>) -> DMatrix<f64> {
    let Some(first) = it.next() else {
        return DMatrix::zeros(0, 0);
    };
    let mut acc = first.clone();
    let mut n = 1.0;
    for m in it {
        acc += m;
        n += 1.0;
    }
    acc / n
}
