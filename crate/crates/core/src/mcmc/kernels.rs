//! Full-conditional updates. Each kernel reads the current [`ChainState`],
//! draws from its conditional with the state's own random stream, and writes
//! the result back.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Open01, StandardNormal};

use super::config::{McmcConfig, STEP_SD_MAX, STEP_SD_MIN};
use super::state::{factor_correlation, ChainState, ModelContext, SpatialCache};
use crate::linalg::{
    cholesky, sample_inverse_wishart, sample_truncated_normal_upper, standard_normal_matrix,
    CholeskyFactor, SeparableQuadForm,
};
use crate::{Error, Result};

fn logit(u: f64) -> f64 {
    (u / (1.0 - u)).ln()
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Residual `Y − X B` at the current state.
fn trend_residual(state: &ChainState, ctx: &ModelContext<'_>) -> DMatrix<f64> {
    &state.y - &ctx.data.x * &state.params.beta
}

/// Mean `B̂` (Q × P) and row covariance `V` (Q × Q) of the matrix-normal full
/// conditional of the coefficients; the column covariance is Σ.
///
/// `V = [XᵀX / (1 − r) + I / s²]⁻¹`, `B̂ = V Xᵀ (Y − E) / (1 − r)`.
pub fn beta_conditional(state: &ChainState, ctx: &ModelContext<'_>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (precision_factor, rhs) = beta_system(state, ctx)?;
    Ok((precision_factor.solve(&rhs), precision_factor.inverse()))
}

fn beta_system(state: &ChainState, ctx: &ModelContext<'_>) -> Result<(CholeskyFactor, DMatrix<f64>)> {
    let x = &ctx.data.x;
    let q = ctx.q();
    let nugget = 1.0 - state.params.r;
    let prior_precision = 1.0 / (ctx.hyper.beta_prior_sd * ctx.hyper.beta_prior_sd);
    let precision = x.tr_mul(x) / nugget + DMatrix::identity(q, q) * prior_precision;
    let rhs = x.tr_mul(&(&state.y - &state.latent.epsilon)) / nugget;
    Ok((cholesky(&precision)?, rhs))
}

pub fn update_beta(state: &mut ChainState, ctx: &ModelContext<'_>) -> Result<()> {
    let (k, rhs) = beta_system(state, ctx)?;
    let sigma = cholesky(&state.params.sigma)?;
    // B = K⁻ᵀ (K⁻¹ rhs + Z L_Σᵀ)
    let z = standard_normal_matrix(ctx.q(), ctx.p(), &mut state.rng);
    let mut w = k.solve_lower(&rhs) + z * sigma.l().transpose();
    k.solve_upper_mut(&mut w);
    state.params.beta = w;
    Ok(())
}

/// Degrees of freedom and scale of the inverse-Wishart full conditional of Σ.
///
/// `ν = ν₀ + 2N + Q (+ 2M)`,
/// `Ψ = c I + RᵀR/(1 − r) + Eᵀ Σ_S⁻¹ E / r + BᵀB / s²` with `R = Y − XB − E`.
pub fn sigma_conditional(state: &ChainState, ctx: &ModelContext<'_>) -> Result<(f64, DMatrix<f64>)> {
    let (n, p, q) = (ctx.n() as f64, ctx.p(), ctx.q() as f64);
    let h = &ctx.hyper;
    let r = state.params.r;
    let e = &state.latent.epsilon;
    let resid = trend_residual(state, ctx) - e;
    let whitened = state.cache.chol.solve_lower(e);
    let beta = &state.params.beta;
    let psi = DMatrix::identity(p, p) * h.iw_scale_mult
        + resid.tr_mul(&resid) / (1.0 - r)
        + whitened.tr_mul(&whitened) / r
        + beta.tr_mul(beta) / (h.beta_prior_sd * h.beta_prior_sd);
    let psi = crate::linalg::symmetrize(&psi);
    let nu = h.iw_df + 2.0 * n + q + ctx.nu_extra;
    Ok((nu, psi))
}

pub fn update_sigma(state: &mut ChainState, ctx: &ModelContext<'_>) -> Result<()> {
    let (nu, psi) = sigma_conditional(state, ctx)?;
    state.params.sigma = sample_inverse_wishart(nu, &psi, &mut state.rng)?;
    Ok(())
}

/// Factor `K` of `C = LᵀL / (1 − r) + I / r`, where `Σ_S = L Lᵀ`. The latent
/// field's conditional row covariance is `L C⁻¹ Lᵀ`.
fn epsilon_system(state: &ChainState) -> Result<CholeskyFactor> {
    let r = state.params.r;
    let n = state.cache.gram.nrows();
    let c = &state.cache.gram / (1.0 - r) + DMatrix::identity(n, n) / r;
    cholesky(&c)
}

/// Mean (N × P) and row covariance (N × N) of the latent field's matrix-normal
/// full conditional; the column covariance is Σ.
///
/// Row covariance `[I/(1 − r) + Σ_S⁻¹/r]⁻¹`, mean `row_cov (Y − XB) / (1 − r)`.
pub fn epsilon_conditional(state: &ChainState, ctx: &ModelContext<'_>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = epsilon_system(state)?;
    let l = state.cache.chol.l();
    let resid = trend_residual(state, ctx) / (1.0 - state.params.r);
    let mean = l * k.solve(&l.tr_mul(&resid));
    let half = l * k.solve_upper(&DMatrix::identity(ctx.n(), ctx.n()));
    Ok((mean, crate::linalg::symmetrize(&(&half * half.transpose()))))
}

pub fn update_epsilon(state: &mut ChainState, ctx: &ModelContext<'_>) -> Result<()> {
    let k = epsilon_system(state)?;
    let sigma = cholesky(&state.params.sigma)?;
    let resid = trend_residual(state, ctx) / (1.0 - state.params.r);
    let l = state.cache.chol.l();
    // E = L K⁻ᵀ (K⁻¹ Lᵀ R / (1 − r) + Z L_Σᵀ)
    let z = standard_normal_matrix(ctx.n(), ctx.p(), &mut state.rng);
    let mut w = k.solve_lower(&l.tr_mul(&resid)) + z * sigma.l().transpose();
    k.solve_upper_mut(&mut w);
    state.latent.epsilon = l * w;
    Ok(())
}

/// Per-variable conditioning of one response on the others at the same site
/// under the nugget covariance `(1 − r) Σ`.
#[derive(Debug, Clone)]
pub struct NuggetConditional {
    /// `Σ_{p,−p} Σ_{−p,−p}⁻¹`, indexed by the other variables in order.
    pub weights: Vec<Vec<f64>>,
    /// `(1 − r)(Σ_pp − Σ_{p,−p} Σ_{−p,−p}⁻¹ Σ_{−p,p})`.
    pub variance: Vec<f64>,
}

impl NuggetConditional {
    pub fn new(sigma: &DMatrix<f64>, r: f64) -> Result<Self> {
        let p = sigma.nrows();
        let mut weights = Vec::with_capacity(p);
        let mut variance = Vec::with_capacity(p);
        for v in 0..p {
            let others: Vec<usize> = (0..p).filter(|&o| o != v).collect();
            if others.is_empty() {
                weights.push(Vec::new());
                variance.push((1.0 - r) * sigma[(v, v)]);
                continue;
            }
            let s_oo = DMatrix::from_fn(others.len(), others.len(), |a, b| sigma[(others[a], others[b])]);
            let s_ov = DMatrix::from_fn(others.len(), 1, |a, _| sigma[(others[a], v)]);
            let w = cholesky(&s_oo)?.solve(&s_ov);
            let explained = (0..others.len()).map(|a| w[(a, 0)] * s_ov[(a, 0)]).sum::<f64>();
            let var = (1.0 - r) * (sigma[(v, v)] - explained);
            if !(var > 0.0) {
                return Err(Error::NotPositiveDefinite { pivot: v });
            }
            weights.push(w.iter().copied().collect());
            variance.push(var);
        }
        Ok(Self { weights, variance })
    }
}

/// `(μ*, σ²*)` of the truncated-normal full conditional of censored cell
/// `(site, var)` given everything else, before truncation.
pub fn imputation_conditional(
    state: &ChainState,
    ctx: &ModelContext<'_>,
    site: usize,
    var: usize,
) -> Result<(f64, f64)> {
    let cond = NuggetConditional::new(&state.params.sigma, state.params.r)?;
    Ok(conditional_moments(state, ctx, &cond, site, var))
}

fn conditional_moments(
    state: &ChainState,
    ctx: &ModelContext<'_>,
    cond: &NuggetConditional,
    site: usize,
    var: usize,
) -> (f64, f64) {
    let x = ctx.data.x.row(site);
    let beta = &state.params.beta;
    let eps = &state.latent.epsilon;
    let loc = |p: usize| (x * beta.column(p))[(0, 0)] + eps[(site, p)];
    let mut mean = loc(var);
    let others = (0..ctx.p()).filter(|&o| o != var);
    for (w, o) in cond.weights[var].iter().zip(others) {
        mean += w * (state.y[(site, o)] - loc(o));
    }
    (mean, cond.variance[var])
}

/// Redraws every censored cell from its truncated conditional, in site-major
/// order, each conditioned on the current values of the other variables.
pub fn impute_censored(state: &mut ChainState, ctx: &ModelContext<'_>) -> Result<()> {
    if ctx.cells.is_empty() {
        return Ok(());
    }
    let cond = NuggetConditional::new(&state.params.sigma, state.params.r)?;
    for (k, &(site, var)) in ctx.cells.iter().enumerate() {
        let (mean, variance) = conditional_moments(state, ctx, &cond, site, var);
        let limit = ctx.data.limits[(site, var)];
        let value = sample_truncated_normal_upper(mean, variance.sqrt(), limit, &mut state.rng);
        if !value.is_finite() {
            return Err(Error::domain(format!(
                "censored cell ({site}, {var}) has conditional mean {mean} and variance {variance}"
            )));
        }
        state.y[(site, var)] = value;
        state.latent.imputed[k] = value;
    }
    Ok(())
}

fn epsilon_log_density(state: &ChainState, chol: &CholeskyFactor, sigma: &CholeskyFactor, r: f64) -> f64 {
    SeparableQuadForm::new(&state.latent.epsilon, chol, sigma).logpdf_scaled(r)
}

/// Log acceptance ratio for moving the range from its current value to
/// `candidate` given the candidate's correlation factor.
pub fn log_ratio_phi(
    state: &ChainState,
    ctx: &ModelContext<'_>,
    candidate: f64,
    candidate_chol: &CholeskyFactor,
) -> Result<f64> {
    let sigma = cholesky(&state.params.sigma)?;
    let r = state.params.r;
    let phi_max = ctx.hyper.phi_max;
    let current = state.params.phi;
    let lp_c = epsilon_log_density(state, candidate_chol, &sigma, r);
    let lp_m = epsilon_log_density(state, &state.cache.chol, &sigma, r);
    let jac = (candidate * (phi_max - candidate)).ln() - (current * (phi_max - current)).ln();
    Ok(lp_c - lp_m + jac)
}

/// Logit random-walk Metropolis–Hastings step on `φ / φ_max`.
pub fn update_phi(state: &mut ChainState, ctx: &ModelContext<'_>) -> Result<bool> {
    let phi_max = ctx.hyper.phi_max;
    let step: f64 = state.rng.sample(StandardNormal);
    let u: f64 = state.rng.sample(Open01);
    let candidate = phi_max * logistic(logit(state.params.phi / phi_max) + state.step_sd_phi * step);
    if !(candidate > 0.0 && candidate < phi_max) {
        return Ok(false);
    }
    let chol = match factor_correlation(&ctx.dist, candidate) {
        Ok(c) => c,
        Err(Error::NotPositiveDefinite { .. }) => {
            log::warn!("rejecting range candidate {candidate}: correlation not factorizable");
            return Ok(false);
        }
        Err(e) => return Err(e),
    };
    let log_r = log_ratio_phi(state, ctx, candidate, &chol)?;
    if u.ln() < log_r {
        state.params.phi = candidate;
        state.cache = SpatialCache::from_factor(candidate, chol);
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Log acceptance ratio for moving `r` to `candidate`: nugget likelihood of Y,
/// latent-field density, and the logit-proposal Jacobian.
pub fn log_ratio_r(state: &ChainState, ctx: &ModelContext<'_>, candidate: f64) -> Result<f64> {
    let sigma = cholesky(&state.params.sigma)?;
    let current = state.params.r;
    let resid = trend_residual(state, ctx) - &state.latent.epsilon;
    // row covariance (1 − r) I_N: identity factor, log-det 0
    let nugget = SeparableQuadForm {
        n: ctx.n(),
        p: ctx.p(),
        quad: sigma.quad_form(&resid.transpose()),
        row_log_det: 0.0,
        col_log_det: sigma.log_det(),
    };
    let latent = SeparableQuadForm::new(&state.latent.epsilon, &state.cache.chol, &sigma);
    let lr_y = nugget.logpdf_scaled(1.0 - candidate) - nugget.logpdf_scaled(1.0 - current);
    let lr_e = latent.logpdf_scaled(candidate) - latent.logpdf_scaled(current);
    let jac = (candidate * (1.0 - candidate)).ln() - (current * (1.0 - current)).ln();
    Ok(lr_y + lr_e + jac)
}

/// Logit random-walk Metropolis–Hastings step on `r`.
pub fn update_r(state: &mut ChainState, ctx: &ModelContext<'_>) -> Result<bool> {
    let step: f64 = state.rng.sample(StandardNormal);
    let u: f64 = state.rng.sample(Open01);
    let candidate = logistic(logit(state.params.r) + state.step_sd_r * step);
    if !(candidate > 0.0 && candidate < 1.0) {
        return Ok(false);
    }
    if u.ln() < log_ratio_r(state, ctx, candidate)? {
        state.params.r = candidate;
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Multiplicative step-size adaptation, applied at the end of each burn-in
/// window: `sd ← clamp(sd · exp(κ (rate − target)))`.
pub fn adapt_steps(state: &mut ChainState, config: &McmcConfig) {
    if !config.adapt || state.iteration > config.burn_in || !state.iteration.is_multiple_of(config.adapt_window) {
        return;
    }
    let window = config.adapt_window as f64;
    let rate_phi = state.window_accepts_phi as f64 / window;
    let rate_r = state.window_accepts_r as f64 / window;
    state.step_sd_phi = adapted_sd(state.step_sd_phi, rate_phi, config);
    state.step_sd_r = adapted_sd(state.step_sd_r, rate_r, config);
    state.window_accepts_phi = 0;
    state.window_accepts_r = 0;
}

pub fn adapted_sd(sd: f64, rate: f64, config: &McmcConfig) -> f64 {
    (sd * (config.adapt_gain * (rate - config.adapt_target)).exp()).clamp(STEP_SD_MIN, STEP_SD_MAX)
}

/// One full sweep in the fixed order: impute, β, Σ, ε, φ, r, then adaptation.
pub fn sweep(state: &mut ChainState, ctx: &ModelContext<'_>, config: &McmcConfig) -> Result<()> {
    let it = state.iteration + 1;
    let wrap = |kernel: &'static str| move |e: Error| Error::Kernel {
        iteration: it,
        kernel,
        source: Box::new(e),
    };
    impute_censored(state, ctx).map_err(wrap("impute_censored"))?;
    update_beta(state, ctx).map_err(wrap("update_beta"))?;
    update_sigma(state, ctx).map_err(wrap("update_sigma"))?;
    update_epsilon(state, ctx).map_err(wrap("update_epsilon"))?;
    state.accepted_phi = update_phi(state, ctx).map_err(wrap("update_phi"))?;
    state.accepted_r = update_r(state, ctx).map_err(wrap("update_r"))?;
    state.iteration = it;
    state.window_accepts_phi += state.accepted_phi as usize;
    state.window_accepts_r += state.accepted_r as usize;
    adapt_steps(state, config);
    Ok(())
}
