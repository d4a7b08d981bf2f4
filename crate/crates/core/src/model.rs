//! Data and parameter types of the separable multivariate spatial model, plus
//! the deterministic covariance pieces built from them.
//!
//! Matrices use the `sites × variables` layout throughout: row `i` of `y`
//! holds the `P` responses at site `i`, so the row-stacked vector of `y`
//! matches the site-major ordering `[Y(s₁)', …, Y(s_N)']'`. Kronecker
//! expressions are written `spatial ⊗ cross-variable`.

use nalgebra::DMatrix;

use crate::geometry::{distance_matrix, max_pairwise_distance, DistanceMetric, Location};
use crate::{Error, Result};

/// How covariates are derived from a location: `[1, x, y]`, optionally with the
/// two coordinate columns centered and scaled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DesignConvention {
    Raw,
    Standardized {
        x_mean: f64,
        x_sd: f64,
        y_mean: f64,
        y_sd: f64,
    },
}

impl DesignConvention {
    /// Centering and scaling constants (sample variance, `n - 1`) from `locs`.
    pub fn standardized_from(locs: &[Location]) -> Result<Self> {
        if locs.len() < 2 {
            return Err(Error::domain("standardization needs at least two locations"));
        }
        let (x_mean, x_sd) = mean_sd(locs.iter().map(|l| l.x));
        let (y_mean, y_sd) = mean_sd(locs.iter().map(|l| l.y));
        if !(x_sd > 0.0 && y_sd > 0.0) {
            return Err(Error::domain("coordinate column has zero variance"));
        }
        Ok(DesignConvention::Standardized {
            x_mean,
            x_sd,
            y_mean,
            y_sd,
        })
    }

    pub fn n_covariates(&self) -> usize {
        3
    }

    pub fn design_row(&self, loc: &Location) -> Vec<f64> {
        match *self {
            DesignConvention::Raw => vec![1.0, loc.x, loc.y],
            DesignConvention::Standardized {
                x_mean,
                x_sd,
                y_mean,
                y_sd,
            } => vec![1.0, (loc.x - x_mean) / x_sd, (loc.y - y_mean) / y_sd],
        }
    }

    pub fn design_matrix(&self, locs: &[Location]) -> DMatrix<f64> {
        let q = self.n_covariates();
        let mut x = DMatrix::zeros(locs.len(), q);
        for (i, l) in locs.iter().enumerate() {
            for (j, v) in self.design_row(l).into_iter().enumerate() {
                x[(i, j)] = v;
            }
        }
        x
    }
}

pub fn design_row(loc: &Location, convention: &DesignConvention) -> Vec<f64> {
    convention.design_row(loc)
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Observed (log-scale) multivariate responses at a set of sites.
///
/// Where `censored[(i, p)]` is set, `y[(i, p)]` is only a placeholder and the
/// true value is known to lie below `limits[(i, p)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDataset {
    pub locations: Vec<Location>,
    pub y: DMatrix<f64>,
    pub censored: DMatrix<bool>,
    pub limits: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub variable_names: Vec<String>,
    pub design: DesignConvention,
}

impl SpatialDataset {
    /// Assembles and validates a dataset; the design matrix follows `design`.
    pub fn new(
        locations: Vec<Location>,
        y: DMatrix<f64>,
        censored: DMatrix<bool>,
        limits: DMatrix<f64>,
        variable_names: Vec<String>,
        design: DesignConvention,
    ) -> Result<Self> {
        let x = design.design_matrix(&locations);
        let ds = Self {
            locations,
            y,
            censored,
            limits,
            x,
            variable_names,
            design,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, p) = (self.n_sites(), self.n_vars());
        if n == 0 || p == 0 {
            return Err(Error::dimension("dataset needs at least one site and one variable"));
        }
        if self.y.shape() != (n, p)
            || self.censored.shape() != (n, p)
            || self.limits.shape() != (n, p)
            || self.x.nrows() != n
            || self.variable_names.len() != p
        {
            return Err(Error::dimension("dataset component shapes disagree"));
        }
        if self.x.ncols() == 0 {
            return Err(Error::dimension("design matrix needs at least one column"));
        }
        for i in 0..n {
            for j in 0..p {
                if self.censored[(i, j)] {
                    if !self.limits[(i, j)].is_finite() {
                        return Err(Error::ingest(Some(i + 1), "censored cell has no finite limit"));
                    }
                } else if !self.y[(i, j)].is_finite() {
                    return Err(Error::ingest(Some(i + 1), "observed value is not finite"));
                }
            }
        }
        check_distinct(&self.locations)
    }

    pub fn n_sites(&self) -> usize {
        self.locations.len()
    }

    pub fn n_vars(&self) -> usize {
        self.variable_names.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    /// Censored cells as `(site, variable)`, site-major.
    pub fn censored_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n_sites() {
            for p in 0..self.n_vars() {
                if self.censored[(i, p)] {
                    out.push((i, p));
                }
            }
        }
        out
    }

    pub fn censored_count(&self, var: usize) -> usize {
        (0..self.n_sites()).filter(|&i| self.censored[(i, var)]).count()
    }

    /// Sites with no censored variable.
    pub fn fully_observed_sites(&self) -> Vec<usize> {
        (0..self.n_sites())
            .filter(|&i| (0..self.n_vars()).all(|p| !self.censored[(i, p)]))
            .collect()
    }

    /// Dataset restricted to the listed sites, in the given order.
    pub fn select_sites(&self, sites: &[usize]) -> Result<Self> {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(sites.len(), m.ncols(), |i, j| m[(sites[i], j)]);
        let ds = Self {
            locations: sites.iter().map(|&i| self.locations[i]).collect(),
            y: pick(&self.y),
            censored: DMatrix::from_fn(sites.len(), self.n_vars(), |i, j| self.censored[(sites[i], j)]),
            limits: pick(&self.limits),
            x: pick(&self.x),
            variable_names: self.variable_names.clone(),
            design: self.design,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn without_site(&self, site: usize) -> Result<Self> {
        let keep: Vec<usize> = (0..self.n_sites()).filter(|&i| i != site).collect();
        self.select_sites(&keep)
    }
}

/// Rejects coincident sites: they make the spatial correlation singular.
/// Error rows are 1-based.
pub fn check_distinct(locs: &[Location]) -> Result<()> {
    let mut sorted: Vec<(usize, Location)> = locs.iter().copied().enumerate().collect();
    sorted.sort_by(|a, b| {
        a.1.x
            .total_cmp(&b.1.x)
            .then(a.1.y.total_cmp(&b.1.y))
    });
    for w in sorted.windows(2) {
        if w[0].1 == w[1].1 {
            let (a, b) = (w[0].0.min(w[1].0), w[0].0.max(w[1].0));
            return Err(Error::ingest(
                Some(b + 1),
                format!("duplicate coordinates ({}, {}) also at row {}", w[0].1.x, w[0].1.y, a + 1),
            ));
        }
    }
    Ok(())
}

/// Regression coefficients `beta` (Q × P), cross-covariance `sigma` (P × P),
/// spatial range `phi` and spatial-to-total variance ratio `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub beta: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub phi: f64,
    pub r: f64,
}

impl ModelParams {
    pub fn validate(&self, phi_max: f64) -> Result<()> {
        if !(self.phi > 0.0 && self.phi < phi_max) {
            return Err(Error::domain(format!("phi {} outside (0, {phi_max})", self.phi)));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::domain(format!("r {} outside (0, 1)", self.r)));
        }
        if self.beta.ncols() != self.sigma.nrows() {
            return Err(Error::dimension("beta columns must match sigma dimension"));
        }
        crate::linalg::cholesky(&self.sigma).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperpriors {
    /// Prior standard deviation scale of the regression coefficients.
    pub beta_prior_sd: f64,
    /// Inverse-Wishart prior degrees of freedom.
    pub iw_df: f64,
    /// Inverse-Wishart prior scale is `iw_scale_mult · I`.
    pub iw_scale_mult: f64,
    /// Upper end of the uniform prior on the range.
    pub phi_max: f64,
}

impl Hyperpriors {
    pub const DEFAULT_BETA_PRIOR_SD: f64 = 100.0;
    pub const DEFAULT_IW_DF: f64 = 0.01;
    pub const DEFAULT_IW_SCALE: f64 = 0.01;

    /// Defaults with `phi_max = fraction · Δ`, Δ the largest pairwise distance.
    pub fn with_phi_fraction(locs: &[Location], metric: DistanceMetric, fraction: f64) -> Result<Self> {
        let delta = max_pairwise_distance(locs, metric)?;
        let h = Self {
            beta_prior_sd: Self::DEFAULT_BETA_PRIOR_SD,
            iw_df: Self::DEFAULT_IW_DF,
            iw_scale_mult: Self::DEFAULT_IW_SCALE,
            phi_max: fraction * delta,
        };
        h.validate()?;
        Ok(h)
    }

    /// Data-application defaults: `phi_max = 0.5 Δ`.
    pub fn for_data(locs: &[Location], metric: DistanceMetric) -> Result<Self> {
        Self::with_phi_fraction(locs, metric, 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_prior_sd", self.beta_prior_sd),
            ("iw_df", self.iw_df),
            ("iw_scale_mult", self.iw_scale_mult),
            ("phi_max", self.phi_max),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::domain(format!("hyperparameter {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Latent spatial field at the data sites and the current values standing in
/// for censored cells (aligned with [`SpatialDataset::censored_cells`]).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub epsilon: DMatrix<f64>,
    pub imputed: Vec<f64>,
}

/// `exp(-d / phi)` applied entrywise to a distance matrix.
pub fn corr_from_distances(dist: &DMatrix<f64>, phi: f64) -> DMatrix<f64> {
    let inv = 1.0 / phi;
    dist.map(|d| (-d * inv).exp())
}

pub fn spatial_corr_matrix(locs: &[Location], phi: f64, metric: DistanceMetric) -> Result<DMatrix<f64>> {
    if !(phi > 0.0) {
        return Err(Error::domain(format!("range must be positive, got {phi}")));
    }
    Ok(corr_from_distances(&distance_matrix(locs, metric)?, phi))
}

/// `(r Σ_S + (1 - r) I_N, Σ)`: the two Kronecker factors of the marginal
/// covariance of the responses.
pub fn marginal_covariance_factors(
    params: &ModelParams,
    locs: &[Location],
    metric: DistanceMetric,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let corr = spatial_corr_matrix(locs, params.phi, metric)?;
    Ok((row_cov_from_corr(&corr, params.r), params.sigma.clone()))
}

pub(crate) fn row_cov_from_corr(corr: &DMatrix<f64>, r: f64) -> DMatrix<f64> {
    let n = corr.nrows();
    corr * r + DMatrix::identity(n, n) * (1.0 - r)
}
