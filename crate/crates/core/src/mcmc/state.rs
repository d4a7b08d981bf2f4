use nalgebra::DMatrix;

use super::config::McmcConfig;
use crate::geometry::{distance_matrix, DistanceMetric};
use crate::linalg::{cholesky, CholeskyFactor, RngStream};
use crate::model::{corr_from_distances, Hyperpriors, LatentState, ModelParams, SpatialDataset};
use crate::{Error, Result};

/// Last-resort diagonal jitter for the spatial correlation factorization.
pub const CORR_JITTER: f64 = 1e-10;

/// Everything about the fit that stays fixed while the chain runs.
#[derive(Debug, Clone)]
pub struct ModelContext<'a> {
    pub data: &'a SpatialDataset,
    pub hyper: Hyperpriors,
    pub metric: DistanceMetric,
    pub dist: DMatrix<f64>,
    pub cells: Vec<(usize, usize)>,
    /// Extra inverse-Wishart degrees of freedom (`2M` in the literal formula).
    pub nu_extra: f64,
}

impl<'a> ModelContext<'a> {
    pub fn new(data: &'a SpatialDataset, hyper: Hyperpriors, metric: DistanceMetric) -> Result<Self> {
        data.validate()?;
        hyper.validate()?;
        Ok(Self {
            data,
            hyper,
            metric,
            dist: distance_matrix(&data.locations, metric)?,
            cells: data.censored_cells(),
            nu_extra: 0.0,
        })
    }

    pub fn with_config(mut self, config: &McmcConfig) -> Self {
        self.nu_extra = if config.nu_includes_predictions {
            2.0 * config.n_prediction_sites as f64
        } else {
            0.0
        };
        self
    }

    pub fn n(&self) -> usize {
        self.data.n_sites()
    }

    pub fn p(&self) -> usize {
        self.data.n_vars()
    }

    pub fn q(&self) -> usize {
        self.data.n_covariates()
    }
}

/// Spatial correlation at one range value with its factorization and `LᵀL`.
#[derive(Debug, Clone)]
pub struct SpatialCache {
    pub phi: f64,
    pub chol: CholeskyFactor,
    pub gram: DMatrix<f64>,
}

impl SpatialCache {
    pub fn new(dist: &DMatrix<f64>, phi: f64) -> Result<Self> {
        let chol = factor_correlation(dist, phi)?;
        Ok(Self::from_factor(phi, chol))
    }

    pub fn from_factor(phi: f64, chol: CholeskyFactor) -> Self {
        let gram = chol.l().tr_mul(chol.l());
        Self { phi, chol, gram }
    }
}

/// Factorizes `exp(-d/φ)`, retrying once with a tiny diagonal jitter.
pub fn factor_correlation(dist: &DMatrix<f64>, phi: f64) -> Result<CholeskyFactor> {
    let corr = corr_from_distances(dist, phi);
    match cholesky(&corr) {
        Ok(f) => Ok(f),
        Err(Error::NotPositiveDefinite { pivot }) => {
            log::warn!(
                "spatial correlation at phi = {phi} not numerically positive definite (pivot {pivot}); \
                 retrying with diagonal jitter {CORR_JITTER}"
            );
            let n = corr.nrows();
            cholesky(&(corr + DMatrix::identity(n, n) * CORR_JITTER))
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone)]
pub struct ChainState {
    pub params: ModelParams,
    pub latent: LatentState,
    /// Responses with censored cells holding their current imputations.
    pub y: DMatrix<f64>,
    pub step_sd_phi: f64,
    pub step_sd_r: f64,
    pub iteration: usize,
    pub rng: RngStream,
    pub accepted_phi: bool,
    pub accepted_r: bool,
    pub(crate) window_accepts_phi: usize,
    pub(crate) window_accepts_r: usize,
    pub(crate) cache: SpatialCache,
}

impl ChainState {
    pub fn new(
        ctx: &ModelContext<'_>,
        params: ModelParams,
        latent: LatentState,
        step_sd: f64,
        rng: RngStream,
    ) -> Result<Self> {
        params.validate(ctx.hyper.phi_max)?;
        let (n, p) = (ctx.n(), ctx.p());
        if params.beta.shape() != (ctx.q(), p) {
            return Err(Error::dimension("beta must be Q x P"));
        }
        if latent.epsilon.shape() != (n, p) || latent.imputed.len() != ctx.cells.len() {
            return Err(Error::dimension("latent state does not match the data"));
        }
        let mut y = ctx.data.y.clone();
        for (&(i, v), &val) in ctx.cells.iter().zip(&latent.imputed) {
            if !(val < ctx.data.limits[(i, v)]) {
                return Err(Error::domain(format!(
                    "initial value {val} at censored cell ({i}, {v}) is not below its limit"
                )));
            }
            y[(i, v)] = val;
        }
        let cache = SpatialCache::new(&ctx.dist, params.phi)?;
        Ok(Self {
            params,
            latent,
            y,
            step_sd_phi: step_sd,
            step_sd_r: step_sd,
            iteration: 0,
            rng,
            accepted_phi: false,
            accepted_r: false,
            window_accepts_phi: 0,
            window_accepts_r: 0,
            cache,
        })
    }

    /// Default starting point: least-squares β on complete sites, Σ from their
    /// residual covariance, φ = φ_max / 4, r = 0.5, ε = 0, and each censored
    /// cell at its limit minus 0.1.
    pub fn initialize(ctx: &ModelContext<'_>, config: &McmcConfig) -> Result<Self> {
        let data = ctx.data;
        let (n, p, q) = (ctx.n(), ctx.p(), ctx.q());
        let imputed: Vec<f64> = ctx.cells.iter().map(|&(i, v)| data.limits[(i, v)] - 0.1).collect();
        let mut y_fill = data.y.clone();
        for (&(i, v), &val) in ctx.cells.iter().zip(&imputed) {
            y_fill[(i, v)] = val;
        }
        let complete = data.fully_observed_sites();
        let rows: Vec<usize> = if complete.len() > q + 1 { complete } else { (0..n).collect() };
        let x = DMatrix::from_fn(rows.len(), q, |i, j| data.x[(rows[i], j)]);
        let y = DMatrix::from_fn(rows.len(), p, |i, j| y_fill[(rows[i], j)]);
        let (beta, sigma) = match crate::eda::ols_fit(&x, &y) {
            Ok((coef, resid)) if rows.len() > q + 1 => {
                let dof = (rows.len() - 1) as f64;
                let centered = center_columns(&resid);
                (coef, centered.tr_mul(&centered) / dof)
            }
            _ => (DMatrix::zeros(q, p), DMatrix::identity(p, p)),
        };
        let sigma = if cholesky(&sigma).is_ok() {
            sigma
        } else {
            let diag = sigma.diagonal().map(|v| if v > 0.0 { v } else { 1.0 });
            DMatrix::from_diagonal(&diag)
        };
        let params = ModelParams {
            beta,
            sigma,
            phi: ctx.hyper.phi_max / 4.0,
            r: 0.5,
        };
        let latent = LatentState {
            epsilon: DMatrix::zeros(n, p),
            imputed,
        };
        Self::new(ctx, params, latent, config.initial_step_sd, RngStream::new(config.seed))
    }

    pub fn spatial_factor(&self) -> &CholeskyFactor {
        &self.cache.chol
    }
}

fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}
