//! Exploratory summaries computed before any model fit: log transform,
//! per-variable least squares residuals, residual correlations, and the
//! empirical semivariogram.

use nalgebra::DMatrix;

use crate::geometry::{distance_matrix, DistanceMetric, Location};
use crate::model::SpatialDataset;
use crate::{Error, Result};

/// Natural log of raw concentrations and their detection limits.
///
/// Only observed cells need a positive value; the placeholder in a censored
/// cell is mapped to its log limit. A missing (NaN or infinite) limit is
/// allowed on observed cells and becomes `+∞`. Error rows are 1-based data rows.
pub fn log_transform(
    raw: &DMatrix<f64>,
    censored: &DMatrix<bool>,
    limits_raw: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if raw.shape() != censored.shape() || raw.shape() != limits_raw.shape() {
        return Err(Error::dimension("values, flags and limits differ in shape"));
    }
    let mut y = DMatrix::zeros(raw.nrows(), raw.ncols());
    let mut limits = DMatrix::zeros(raw.nrows(), raw.ncols());
    for i in 0..raw.nrows() {
        for p in 0..raw.ncols() {
            let lim = limits_raw[(i, p)];
            limits[(i, p)] = if lim > 0.0 && lim.is_finite() {
                lim.ln()
            } else if !censored[(i, p)] && (lim.is_nan() || lim == f64::INFINITY) {
                f64::INFINITY
            } else {
                return Err(Error::ingest(Some(i + 1), format!("detection limit {lim} in column {} is not positive", p + 1)));
            };
            if censored[(i, p)] {
                y[(i, p)] = limits[(i, p)];
            } else {
                let v = raw[(i, p)];
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::ingest(Some(i + 1), format!("observed value {v} in column {} is not positive", p + 1)));
                }
                y[(i, p)] = v.ln();
            }
        }
    }
    Ok((y, limits))
}

/// Least squares coefficients (`Q × P`) and residuals (`N × P`) of each
/// response column on `x`.
pub fn ols_fit(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if x.nrows() != y.nrows() {
        return Err(Error::dimension("design and responses differ in row count"));
    }
    if x.nrows() < x.ncols() {
        return Err(Error::domain(format!(
            "least squares needs at least {} rows, got {}",
            x.ncols(),
            x.nrows()
        )));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().amax();
    if !(scale > 0.0) || r.diagonal().iter().any(|d| d.abs() <= 1e-10 * scale) {
        return Err(Error::domain("design matrix is rank deficient"));
    }
    let qty = qr.q().tr_mul(y);
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::domain("design matrix is rank deficient"))?;
    let resid = y - x * &coef;
    Ok((coef, resid))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsResult {
    /// Indices of the complete-case sites used in the fit.
    pub sites: Vec<usize>,
    pub coef: DMatrix<f64>,
    pub residuals: DMatrix<f64>,
}

/// Per-variable least squares on the dataset's design, over sites with no
/// censored variable.
pub fn ols_residuals(data: &SpatialDataset) -> Result<OlsResult> {
    let sites = data.fully_observed_sites();
    let x = DMatrix::from_fn(sites.len(), data.n_covariates(), |i, j| data.x[(sites[i], j)]);
    let y = DMatrix::from_fn(sites.len(), data.n_vars(), |i, j| data.y[(sites[i], j)]);
    let (coef, residuals) = ols_fit(&x, &y)?;
    Ok(OlsResult {
        sites,
        coef,
        residuals,
    })
}

/// Bin centers sharing one half-width.
#[derive(Debug, Clone, PartialEq)]
pub struct VariogramBins {
    pub centers: Vec<f64>,
    pub half_width: f64,
}

impl VariogramBins {
    /// `n_bins` equal-width bins tiling `[0, max_distance]`.
    pub fn equal_width(max_distance: f64, n_bins: usize) -> Result<Self> {
        if n_bins == 0 || !(max_distance > 0.0) {
            return Err(Error::domain("variogram bins need a positive range and at least one bin"));
        }
        let w = max_distance / n_bins as f64;
        Ok(Self {
            centers: (0..n_bins).map(|k| (k as f64 + 0.5) * w).collect(),
            half_width: 0.5 * w,
        })
    }

    /// 15 bins over half the largest inter-site distance.
    pub fn default_for(locs: &[Location], metric: DistanceMetric) -> Result<Self> {
        let dmax = crate::geometry::max_pairwise_distance(locs, metric)?;
        Self::equal_width(0.5 * dmax, DEFAULT_VARIOGRAM_BINS)
    }
}

pub const DEFAULT_VARIOGRAM_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct VariogramBin {
    pub center: f64,
    /// `None` when no pair falls in the bin.
    pub gamma: Option<f64>,
    pub n_pairs: usize,
}

/// Empirical semivariogram: half the mean squared difference over site pairs
/// whose distance lies strictly inside `(d − h, d + h)`.
pub fn semivariogram(
    values: &[f64],
    locs: &[Location],
    metric: DistanceMetric,
    bins: &VariogramBins,
) -> Result<Vec<VariogramBin>> {
    if values.len() != locs.len() {
        return Err(Error::dimension("one value per location"));
    }
    if !(bins.half_width > 0.0) {
        return Err(Error::domain("variogram half-width must be positive"));
    }
    if locs.len() < 2 {
        log::warn!("semivariogram of fewer than two sites has no pairs");
    }
    let dist = distance_matrix(locs, metric)?;
    let h = bins.half_width;
    Ok(bins
        .centers
        .iter()
        .map(|&d| {
            let (mut sum, mut count) = (0.0, 0usize);
            for i in 0..locs.len() {
                for j in 0..i {
                    let dij = dist[(i, j)];
                    if dij > d - h && dij < d + h {
                        sum += (values[i] - values[j]).powi(2);
                        count += 1;
                    }
                }
            }
            VariogramBin {
                center: d,
                gamma: (count > 0).then(|| sum / (2.0 * count as f64)),
                n_pairs: count,
            }
        })
        .collect())
}

/// Pearson correlations between columns; entries touching a constant column
/// are `None`.
pub fn pairwise_correlations(m: &DMatrix<f64>) -> Result<DMatrix<Option<f64>>> {
    if m.nrows() < 2 {
        return Err(Error::domain("correlations need at least two rows"));
    }
    let p = m.ncols();
    let centered: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            let mean = m.column(j).mean();
            m.column(j).iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    Ok(DMatrix::from_fn(p, p, |a, b| {
        if norms[a] == 0.0 || norms[b] == 0.0 {
            return None;
        }
        if a == b {
            return Some(1.0);
        }
        let dot: f64 = centered[a].iter().zip(&centered[b]).map(|(x, y)| x * y).sum();
        Some((dot / (norms[a] * norms[b])).clamp(-1.0, 1.0))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DesignConvention;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn line_locs(xs: &[f64]) -> Vec<Location> {
        xs.iter().map(|&x| Location { x, y: 0.0 }).collect()
    }

    #[test]
    fn log_transform_cases() {
        let raw = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let cens = DMatrix::from_row_slice(2, 1, &[false, true]);
        let lim = DMatrix::from_element(2, 1, 0.5);
        let (y, l) = log_transform(&raw, &cens, &lim).unwrap();
        assert_eq!(y[(0, 0)], 0.0);
        assert_relative_eq!(l[(0, 0)], -std::f64::consts::LN_2, epsilon = 1e-12);
        assert_eq!(y[(1, 0)], l[(1, 0)]);

        let cens = DMatrix::from_element(2, 1, false);
        match log_transform(&raw, &cens, &lim) {
            Err(Error::Ingest { row: Some(2), .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ols_exact_and_intercept_only() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 5.0]);
        let y = DMatrix::from_fn(4, 1, |i, _| 3.0 - 2.0 * x[(i, 1)]);
        let (coef, resid) = ols_fit(&x, &y).unwrap();
        assert_relative_eq!(coef[(0, 0)], 3.0, epsilon = 1e-12);
        assert_relative_eq!(coef[(1, 0)], -2.0, epsilon = 1e-12);
        assert!(resid.amax() < 1e-12);

        let ones = DMatrix::from_element(3, 1, 1.0);
        let y = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 6.0]);
        let (coef, resid) = ols_fit(&ones, &y).unwrap();
        assert_relative_eq!(coef[(0, 0)], 3.0, epsilon = 1e-12);
        assert_relative_eq!(resid[(2, 0)], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn ols_three_point_hand_solution() {
        // y on [1, t] at t = 0, 1, 2 with y = 1, 2, 4.
        // Normal equations [[3, 3], [3, 5]] b = [7, 10] give b = [5/6, 3/2].
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 4.0]);
        let (coef, resid) = ols_fit(&x, &y).unwrap();
        assert_relative_eq!(coef[(0, 0)], 5.0 / 6.0, epsilon = 1e-12);
        assert_relative_eq!(coef[(1, 0)], 1.5, epsilon = 1e-12);
        assert_relative_eq!(resid[(0, 0)], 1.0 / 6.0, epsilon = 1e-12);
        assert_relative_eq!(resid[(1, 0)], -1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(resid[(2, 0)], 1.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn ols_rank_deficient() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let y = DMatrix::from_element(3, 1, 1.0);
        assert!(matches!(ols_fit(&x, &y), Err(Error::Domain(_))));
    }

    #[test]
    fn ols_residuals_skip_censored_sites() {
        let locs: Vec<Location> = (0..6).map(|k| Location { x: k as f64, y: (k * k) as f64 }).collect();
        let y = DMatrix::from_fn(6, 2, |i, p| (i + p) as f64 * 0.3 + if i == 2 { 50.0 } else { 0.0 });
        let mut cens = DMatrix::from_element(6, 2, false);
        cens[(2, 1)] = true;
        let lim = DMatrix::from_element(6, 2, 100.0);
        let data = SpatialDataset::new(locs, y, cens, lim, vec!["a".into(), "b".into()], DesignConvention::Raw).unwrap();
        let fit = ols_residuals(&data).unwrap();
        assert_eq!(fit.sites, vec![0, 1, 3, 4, 5]);
        assert_eq!(fit.residuals.shape(), (5, 2));
        assert!(fit.residuals.amax() < 1e-10);
    }

    #[test]
    fn semivariogram_cases() {
        let locs = line_locs(&[0.0, 1.0]);
        let bins = VariogramBins {
            centers: vec![1.0, 3.0],
            half_width: 0.5,
        };
        let v = semivariogram(&[0.0, 2.0], &locs, DistanceMetric::Euclidean, &bins).unwrap();
        assert_eq!(v[0].gamma, Some(2.0));
        assert_eq!(v[0].n_pairs, 1);
        assert_eq!(v[1].gamma, None);
        assert_eq!(v[1].n_pairs, 0);

        let locs = line_locs(&[0.0, 0.7, 1.9, 3.2]);
        let bins = VariogramBins::equal_width(3.5, 5).unwrap();
        for b in semivariogram(&[4.0; 4], &locs, DistanceMetric::Euclidean, &bins).unwrap() {
            assert!(b.gamma.is_none() || b.gamma == Some(0.0));
        }
    }

    #[test]
    fn semivariogram_interval_is_open() {
        let locs = line_locs(&[0.0, 1.0]);
        let bins = VariogramBins {
            centers: vec![0.5, 1.5],
            half_width: 0.5,
        };
        let v = semivariogram(&[0.0, 1.0], &locs, DistanceMetric::Euclidean, &bins).unwrap();
        assert_eq!(v[0].n_pairs + v[1].n_pairs, 0);
    }

    #[test]
    fn default_bins() {
        let locs = line_locs(&[0.0, 3.0, 10.0]);
        let b = VariogramBins::default_for(&locs, DistanceMetric::Euclidean).unwrap();
        assert_eq!(b.centers.len(), 15);
        assert_relative_eq!(b.half_width, 5.0 / 30.0, epsilon = 1e-15);
        assert_relative_eq!(*b.centers.last().unwrap() + b.half_width, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn correlation_cases() {
        let m = DMatrix::from_row_slice(4, 3, &[1.0, -1.0, 5.0, 2.0, -2.0, 5.0, 4.0, -4.0, 5.0, 3.0, -3.0, 5.0]);
        let c = pairwise_correlations(&m).unwrap();
        assert_eq!(c[(0, 0)], Some(1.0));
        assert_relative_eq!(c[(0, 1)].unwrap(), -1.0, epsilon = 1e-15);
        assert_eq!(c[(0, 2)], None);
        assert_eq!(c[(2, 2)], None);

        // x = (1, 2, 3, 4), y = (2, 1, 4, 3): centered dot 3, norms √5 √5
        let m = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 2.0, 1.0, 3.0, 4.0, 4.0, 3.0]);
        assert_relative_eq!(pairwise_correlations(&m).unwrap()[(1, 0)].unwrap(), 0.6, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn semivariogram_shift_and_scale(
            vals in proptest::collection::vec(-3.0..3.0f64, 8),
            xs in proptest::collection::vec(0.0..10.0f64, 8),
            c in -5.0..5.0f64,
            s in 0.1..4.0f64,
        ) {
            let locs = line_locs(&xs);
            let bins = VariogramBins::equal_width(10.0, 6).unwrap();
            let base = semivariogram(&vals, &locs, DistanceMetric::Euclidean, &bins).unwrap();
            let shifted: Vec<f64> = vals.iter().map(|v| v + c).collect();
            let scaled: Vec<f64> = vals.iter().map(|v| v * s).collect();
            let sh = semivariogram(&shifted, &locs, DistanceMetric::Euclidean, &bins).unwrap();
            let sc = semivariogram(&scaled, &locs, DistanceMetric::Euclidean, &bins).unwrap();
            for k in 0..base.len() {
                prop_assert_eq!(base[k].n_pairs, sh[k].n_pairs);
                if let Some(g) = base[k].gamma {
                    prop_assert!((sh[k].gamma.unwrap() - g).abs() < 1e-9 * (1.0 + g));
                    prop_assert!((sc[k].gamma.unwrap() - s * s * g).abs() < 1e-9 * (1.0 + s * s * g));
                }
            }
        }

        #[test]
        fn ols_residuals_orthogonal_to_design(
            ys in proptest::collection::vec(-5.0..5.0f64, 10),
            ts in proptest::collection::vec(-3.0..3.0f64, 20),
        ) {
            let x = DMatrix::from_fn(10, 3, |i, j| if j == 0 { 1.0 } else { ts[2 * i + j - 1] });
            let y = DMatrix::from_column_slice(10, 1, &ys);
            if let Ok((_, resid)) = ols_fit(&x, &y) {
                let scale = y.norm().max(1.0);
                for j in 0..3 {
                    prop_assert!(x.column(j).dot(&resid.column(0)).abs() < 1e-8 * scale * x.column(j).norm());
                }
            }
        }
    }
}
