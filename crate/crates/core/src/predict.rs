//! Posterior predictive simulation at new sites and region averages.
//!
//! Each stored draw gives one predictive draw: the latent field at the new
//! sites is drawn from its kriging conditional given the draw's field at the
//! data sites, then the nugget is added.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::geometry::{cross_distance_matrix, distance_matrix, DistanceMetric, Location, RegionPartition};
use crate::linalg::{cholesky, sample_matrix_normal_factored, standard_normal_matrix, symmetrize, CholeskyFactor, RngStream};
use crate::mcmc::{factor_correlation, Draw, PosteriorSamples};
use crate::metrics::{quantile_sorted, sample_mean_sd};
use crate::model::{corr_from_distances, DesignConvention};
use crate::{Error, Result};

/// Diagonal jitter tried in turn when the conditional correlation of the
/// new sites does not factor.
pub const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// Draws per parallel work unit; the factorization cache lives per unit.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid {
    pub locations: Vec<Location>,
    pub x0: DMatrix<f64>,
    /// Region names in partition order.
    pub region_names: Vec<String>,
    /// Index into `region_names` per location.
    pub labels: Vec<Option<usize>>,
}

impl PredictionGrid {
    pub fn new(locations: Vec<Location>, design: &DesignConvention, regions: Option<&RegionPartition>) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::domain("prediction grid is empty"));
        }
        let x0 = design.design_matrix(&locations);
        let (region_names, labels) = match regions {
            Some(part) => {
                let names: Vec<String> = part.regions.iter().map(|r| r.name.clone()).collect();
                let labels: Vec<Option<usize>> = locations
                    .iter()
                    .map(|l| part.regions.iter().position(|r| r.polygon.contains(l)))
                    .collect();
                let unassigned = labels.iter().filter(|l| l.is_none()).count();
                if unassigned > 0 {
                    log::warn!("{unassigned} grid cells fall in no region");
                }
                (names, labels)
            }
            None => (Vec::new(), vec![None; locations.len()]),
        };
        Ok(Self {
            locations,
            x0,
            region_names,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn region_of(&self, cell: usize) -> Option<&str> {
        self.labels[cell].map(|k| self.region_names[k].as_str())
    }
}

/// Distances between and among data and prediction sites.
#[derive(Debug, Clone)]
pub struct PredictionContext {
    pub data_dist: DMatrix<f64>,
    /// `M × N`.
    pub cross_dist: DMatrix<f64>,
    pub grid_dist: DMatrix<f64>,
    pub x0: DMatrix<f64>,
}

impl PredictionContext {
    pub fn new(data_locs: &[Location], grid: &PredictionGrid, metric: DistanceMetric) -> Result<Self> {
        Ok(Self {
            data_dist: distance_matrix(data_locs, metric)?,
            cross_dist: cross_distance_matrix(&grid.locations, data_locs, metric)?,
            grid_dist: distance_matrix(&grid.locations, metric)?,
            x0: grid.x0.clone(),
        })
    }

    /// Kriging weights and conditional factor at one range value.
    pub fn kriging(&self, phi: f64) -> Result<KrigingFactors> {
        let data_chol = factor_correlation(&self.data_dist, phi)?;
        // W = L⁻¹ k₀ᵀ, so the conditional mean is Wᵀ L⁻¹ ε
        let w = data_chol.solve_lower(&corr_from_distances(&self.cross_dist, phi).transpose());
        let cond = symmetrize(&(corr_from_distances(&self.grid_dist, phi) - w.tr_mul(&w)));
        let (cond_chol, jitter) = factor_with_ladder(&cond)?;
        Ok(KrigingFactors {
            phi,
            data_chol,
            w,
            cond_chol,
            jitter,
        })
    }
}

/// Per-range pieces of the conditional law of the latent field at the new
/// sites: `mean = k₀ Σ_S⁻¹ ε`, row covariance `r (K₀₀ − k₀ Σ_S⁻¹ k₀ᵀ)`.
#[derive(Debug, Clone)]
pub struct KrigingFactors {
    pub phi: f64,
    pub data_chol: CholeskyFactor,
    pub w: DMatrix<f64>,
    /// Factor of the conditional correlation (without the `r` scale).
    pub cond_chol: CholeskyFactor,
    /// Diagonal jitter that was needed, 0 if none.
    pub jitter: f64,
}

fn factor_with_ladder(m: &DMatrix<f64>) -> Result<(CholeskyFactor, f64)> {
    match cholesky(m) {
        Ok(c) => return Ok((c, 0.0)),
        Err(Error::NotPositiveDefinite { .. }) => {}
        Err(e) => return Err(e),
    }
    let n = m.nrows();
    for &j in &JITTER_LADDER {
        if let Ok(c) = cholesky(&(m + DMatrix::identity(n, n) * j)) {
            log::debug!("conditional correlation factored with jitter {j}");
            return Ok((c, j));
        }
    }
    Err(Error::NotPositiveDefinite { pivot: 0 })
}

impl KrigingFactors {
    pub fn conditional_mean(&self, epsilon: &DMatrix<f64>) -> DMatrix<f64> {
        self.w.tr_mul(&self.data_chol.solve_lower(epsilon))
    }

    pub fn conditional_row_cov(&self, r: f64) -> DMatrix<f64> {
        self.cond_chol.reconstruct() * r
    }
}

/// Latent field at the prediction sites given one posterior draw.
pub fn draw_epsilon0(draw: &Draw, kf: &KrigingFactors, rng: &mut RngStream) -> Result<DMatrix<f64>> {
    let eps = draw
        .epsilon
        .as_ref()
        .ok_or_else(|| Error::domain("posterior draw has no stored latent field"))?;
    let mean = kf.conditional_mean(eps);
    let sigma = cholesky(&draw.sigma)?;
    Ok(mean + (kf.cond_chol.l() * standard_normal_matrix(kf.w.ncols(), eps.ncols(), rng) * sigma.l().transpose()) * draw.r.sqrt())
}

/// Responses at the prediction sites: `X₀B + ε₀` plus a nugget with row
/// covariance `(1 − r) I` and column covariance Σ.
pub fn draw_y0(draw: &Draw, epsilon0: &DMatrix<f64>, x0: &DMatrix<f64>, rng: &mut RngStream) -> Result<DMatrix<f64>> {
    if x0.nrows() != epsilon0.nrows() || x0.ncols() != draw.beta.nrows() {
        return Err(Error::dimension("prediction design does not conform"));
    }
    let m = x0.nrows();
    let row = CholeskyFactor::from_lower(DMatrix::identity(m, m) * (1.0 - draw.r).sqrt())?;
    let col = cholesky(&draw.sigma)?;
    Ok(sample_matrix_normal_factored(&(x0 * &draw.beta + epsilon0), &row, &col, rng))
}

/// One `M × P` predictive draw per stored posterior draw, in draw order.
///
/// Draw `k` uses the substream `k` of `seed`, so the result does not depend
/// on the number of worker threads.
pub fn predictive_draws(samples: &PosteriorSamples, pctx: &PredictionContext, seed: u64) -> Result<Vec<DMatrix<f64>>> {
    let base = RngStream::new(seed);
    let chunks: Vec<Result<Vec<DMatrix<f64>>>> = samples
        .draws
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut cache: Option<KrigingFactors> = None;
            let mut out = Vec::with_capacity(chunk.len());
            for (j, draw) in chunk.iter().enumerate() {
                let mut rng = base.substream((c * CHUNK + j) as u64);
                if cache.as_ref().is_none_or(|k| k.phi != draw.phi) {
                    cache = Some(pctx.kriging(draw.phi)?);
                }
                let kf = cache.as_ref().expect("cache filled above");
                let eps0 = draw_epsilon0(draw, kf, &mut rng)?;
                out.push(draw_y0(draw, &eps0, &pctx.x0, &mut rng)?);
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(samples.draws.len());
    for c in chunks {
        all.extend(c?);
    }
    Ok(all)
}

/// Values of cell `(cell, var)` across predictive draws.
pub fn ensemble(draws: &[DMatrix<f64>], cell: usize, var: usize) -> Vec<f64> {
    draws.iter().map(|d| d[(cell, var)]).collect()
}

pub const SUMMARY_LEVELS: [f64; 5] = [0.025, 0.05, 0.5, 0.95, 0.975];

/// Per cell and variable: mean, sd, and quantiles at [`SUMMARY_LEVELS`].
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary {
    pub mean: DMatrix<f64>,
    pub sd: DMatrix<f64>,
    pub quantiles: Vec<DMatrix<f64>>,
    /// Mean of `exp(Y)`.
    pub mean_natural: DMatrix<f64>,
}

pub fn summarize_predictive(draws: &[DMatrix<f64>]) -> Result<PredictiveSummary> {
    if draws.len() < 2 {
        return Err(Error::domain("predictive summary needs at least two draws"));
    }
    let (m, p) = draws[0].shape();
    let mut mean = DMatrix::zeros(m, p);
    let mut sd = DMatrix::zeros(m, p);
    let mut mean_natural = DMatrix::zeros(m, p);
    let mut quantiles = vec![DMatrix::zeros(m, p); SUMMARY_LEVELS.len()];
    for i in 0..m {
        for v in 0..p {
            let mut xs = ensemble(draws, i, v);
            let (mu, s) = sample_mean_sd(&xs);
            mean[(i, v)] = mu;
            sd[(i, v)] = s;
            mean_natural[(i, v)] = xs.iter().map(|x| x.exp()).sum::<f64>() / xs.len() as f64;
            xs.sort_by(f64::total_cmp);
            for (q, &level) in quantiles.iter_mut().zip(&SUMMARY_LEVELS) {
                q[(i, v)] = quantile_sorted(&xs, level);
            }
        }
    }
    Ok(PredictiveSummary {
        mean,
        sd,
        quantiles,
        mean_natural,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMean {
    pub region: String,
    pub variable: usize,
    pub n_cells: usize,
    /// Posterior mean of the cell average of `exp(Y)`.
    pub mean: f64,
    /// Monte Carlo standard error: sd across draws over `√S`.
    pub se: f64,
}

/// Region averages of `exp(Y)` per draw, summarized across draws. Regions
/// without cells are skipped with a warning. Ordered region-major.
pub fn region_means(draws: &[DMatrix<f64>], grid: &PredictionGrid) -> Result<Vec<RegionMean>> {
    if draws.len() < 2 {
        return Err(Error::domain("region means need at least two draws"));
    }
    let p = draws[0].ncols();
    let mut out = Vec::new();
    for (k, name) in grid.region_names.iter().enumerate() {
        let cells: Vec<usize> = (0..grid.len()).filter(|&i| grid.labels[i] == Some(k)).collect();
        if cells.is_empty() {
            log::warn!("region {name} contains no grid cells; skipped");
            continue;
        }
        for v in 0..p {
            let per_draw: Vec<f64> = draws
                .iter()
                .map(|d| cells.iter().map(|&i| d[(i, v)].exp()).sum::<f64>() / cells.len() as f64)
                .collect();
            let (mean, sd) = sample_mean_sd(&per_draw);
            out.push(RegionMean {
                region: name.clone(),
                variable: v,
                n_cells: cells.len(),
                mean,
                se: sd / (per_draw.len() as f64).sqrt(),
            });
        }
    }
    Ok(out)
}
