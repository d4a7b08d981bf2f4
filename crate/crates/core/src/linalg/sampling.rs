use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Exp1, Open01, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};

use super::cholesky::{cholesky, symmetrize, CholeskyFactor};
use super::rng::RngStream;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Standardized truncation point below which the tail sampler takes over.
pub const TAIL_SWITCH: f64 = -4.0;

/// Ingredients of a zero-mean matrix-normal log-density with covariance
/// `c_row · row_cov ⊗ c_col · col_cov`, evaluated at fixed data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparableQuadForm {
    pub n: usize,
    pub p: usize,
    /// `tr(col_cov⁻¹ Dᵀ row_cov⁻¹ D)`
    pub quad: f64,
    pub row_log_det: f64,
    pub col_log_det: f64,
}

impl SeparableQuadForm {
    pub fn new(data: &DMatrix<f64>, row: &CholeskyFactor, col: &CholeskyFactor) -> Self {
        assert_eq!(data.nrows(), row.dim(), "data rows vs row covariance");
        assert_eq!(data.ncols(), col.dim(), "data columns vs column covariance");
        let w = row.solve_lower(data).transpose();
        let quad = col.quad_form(&w);
        Self {
            n: data.nrows(),
            p: data.ncols(),
            quad,
            row_log_det: row.log_det(),
            col_log_det: col.log_det(),
        }
    }

    pub fn logpdf(&self) -> f64 {
        self.logpdf_scaled(1.0)
    }

    /// Log-density when the row covariance is multiplied by `row_scale`.
    pub fn logpdf_scaled(&self, row_scale: f64) -> f64 {
        let (n, p) = (self.n as f64, self.p as f64);
        -0.5 * n * p * LN_2PI
            - 0.5 * p * (n * row_scale.ln() + self.row_log_det)
            - 0.5 * n * self.col_log_det
            - 0.5 * self.quad / row_scale
    }
}

/// Log-density of `vec(data) ~ Normal(0, row_cov ⊗ col_cov)` where `vec`
/// stacks the rows of `data` (columns vary fastest).
///
/// Uses the matrix-normal identity; the `NP × NP` covariance is never formed.
pub fn separable_mvn_logpdf(
    data: &DMatrix<f64>,
    row_cov: &DMatrix<f64>,
    col_cov: &DMatrix<f64>,
) -> Result<f64> {
    if data.nrows() != row_cov.nrows() || data.ncols() != col_cov.nrows() {
        return Err(Error::dimension(format!(
            "data {}x{} vs row {}x{} / col {}x{}",
            data.nrows(),
            data.ncols(),
            row_cov.nrows(),
            row_cov.ncols(),
            col_cov.nrows(),
            col_cov.ncols()
        )));
    }
    let row = cholesky(row_cov)?;
    let col = cholesky(col_cov)?;
    Ok(SeparableQuadForm::new(data, &row, &col).logpdf())
}

/// `n × p` matrix of i.i.d. standard normals, filled column by column.
pub fn standard_normal_matrix(n: usize, p: usize, rng: &mut RngStream) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn sample_matrix_normal(
    mean: &DMatrix<f64>,
    row_cov: &DMatrix<f64>,
    col_cov: &DMatrix<f64>,
    rng: &mut RngStream,
) -> Result<DMatrix<f64>> {
    if mean.nrows() != row_cov.nrows() || mean.ncols() != col_cov.nrows() {
        return Err(Error::dimension("matrix-normal mean does not conform"));
    }
    let row = cholesky(row_cov)?;
    let col = cholesky(col_cov)?;
    Ok(sample_matrix_normal_factored(mean, &row, &col, rng))
}

/// `mean + L_row Z L_colᵀ` with `Z` standard normal.
pub fn sample_matrix_normal_factored(
    mean: &DMatrix<f64>,
    row: &CholeskyFactor,
    col: &CholeskyFactor,
    rng: &mut RngStream,
) -> DMatrix<f64> {
    let z = standard_normal_matrix(mean.nrows(), mean.ncols(), rng);
    mean + row.l() * z * col.l().transpose()
}

/// Inverse-Wishart draw with density `∝ |W|^{-(df+P+1)/2} exp(-tr(scale W⁻¹)/2)`.
///
/// Draws a Wishart(df, scale⁻¹) matrix through the Bartlett decomposition and
/// inverts it in factored form, so `scale` itself is never inverted.
pub fn sample_inverse_wishart(
    df: f64,
    scale: &DMatrix<f64>,
    rng: &mut RngStream,
) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    if !(df > p as f64 - 1.0) || !df.is_finite() {
        return Err(Error::domain(format!(
            "inverse-Wishart degrees of freedom {df} must exceed P - 1 = {}",
            p as f64 - 1.0
        )));
    }
    let c = cholesky(scale)?;
    // Bartlett factor A, lower triangular.
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64)
            .map_err(|e| Error::domain(format!("chi-squared: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    // W = C⁻ᵀ A Aᵀ C⁻¹  ⇒  W⁻¹ = (C A⁻ᵀ)(C A⁻ᵀ)ᵀ.
    let a_inv = a
        .solve_lower_triangular(&DMatrix::identity(p, p))
        .ok_or(Error::NotPositiveDefinite { pivot: 0 })?;
    let t = c.l() * a_inv.transpose();
    Ok(symmetrize(&(&t * t.transpose())))
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Draw from `Normal(mean, sd²)` conditioned on being strictly below `upper`.
///
/// Inverse-CDF when the standardized bound is above [`TAIL_SWITCH`], otherwise
/// Robert's exponential-proposal rejection sampler on the mirrored tail. A
/// draw that rounds onto the bound is returned as the next float below it.
/// Non-finite arguments or a non-positive `sd` give NaN.
pub fn sample_truncated_normal_upper(
    mean: f64,
    sd: f64,
    upper: f64,
    rng: &mut RngStream,
) -> f64 {
    if !(sd > 0.0 && sd.is_finite() && mean.is_finite() && upper.is_finite()) {
        return f64::NAN;
    }
    let b = (upper - mean) / sd;
    loop {
        let z = if b >= TAIL_SWITCH {
            let u: f64 = rng.sample(Open01);
            norm_quantile(u * norm_cdf(b))
        } else {
            -sample_std_tail_above(-b, rng)
        };
        let x = mean + sd * z;
        if x.is_finite() {
            return x.min(upper.next_down());
        }
    }
}

/// Draw from `Normal(mean, sd²)` conditioned on being strictly above `lower`.
pub fn sample_truncated_normal_lower(
    mean: f64,
    sd: f64,
    lower: f64,
    rng: &mut RngStream,
) -> f64 {
    -sample_truncated_normal_upper(-mean, sd, -lower, rng)
}

/// Standard normal conditioned on `z > a`, for large positive `a`.
fn sample_std_tail_above(a: f64, rng: &mut RngStream) -> f64 {
    let alpha = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let e: f64 = rng.sample(Exp1);
        let z = a + e / alpha;
        let u: f64 = rng.sample(Open01);
        if u.ln() <= -0.5 * (z - alpha) * (z - alpha) {
            return z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dense_logpdf(data: &DMatrix<f64>, row: &DMatrix<f64>, col: &DMatrix<f64>) -> f64 {
        // vec with columns fastest
        let v = nalgebra::DVector::from_iterator(
            data.len(),
            (0..data.nrows()).flat_map(|i| (0..data.ncols()).map(move |j| (i, j))).map(|(i, j)| data[(i, j)]),
        );
        let k = row.kronecker(col);
        let ch = nalgebra::Cholesky::new(k.clone()).unwrap();
        let sol = ch.solve(&v);
        let logdet = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        -0.5 * (v.len() as f64) * LN_2PI - 0.5 * logdet - 0.5 * v.dot(&sol)
    }

    fn random_spd(n: usize, rng: &mut RngStream) -> DMatrix<f64> {
        let a = standard_normal_matrix(n, n, rng);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn scalar_standard_normal_at_zero() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let v = separable_mvn_logpdf(&DMatrix::zeros(1, 1), &one, &one).unwrap();
        assert_relative_eq!(v, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-15);
    }

    #[test]
    fn matches_dense_kronecker_assembly() {
        let mut rng = RngStream::new(11);
        for _ in 0..25 {
            let n = 1 + (rng.random::<u32>() % 4) as usize;
            let p = 1 + (rng.random::<u32>() % 3) as usize;
            let row = random_spd(n, &mut rng);
            let col = random_spd(p, &mut rng);
            let d = standard_normal_matrix(n, p, &mut rng);
            let fast = separable_mvn_logpdf(&d, &row, &col).unwrap();
            let dense = dense_logpdf(&d, &row, &col);
            assert!((fast - dense).abs() <= 1e-8, "{fast} vs {dense}");
        }
    }

    #[test]
    fn kronecker_scale_identity() {
        let mut rng = RngStream::new(5);
        let row = random_spd(3, &mut rng);
        let col = random_spd(2, &mut rng);
        let d = standard_normal_matrix(3, 2, &mut rng);
        let a = separable_mvn_logpdf(&d, &row, &col).unwrap();
        let b = separable_mvn_logpdf(&d, &(&row * 3.7), &(&col / 3.7)).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-10);
    }

    #[test]
    fn logpdf_rejects_indefinite_and_mismatched() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            separable_mvn_logpdf(&DMatrix::zeros(2, 1), &bad, &one),
            Err(Error::NotPositiveDefinite { .. })
        ));
        assert!(matches!(
            separable_mvn_logpdf(&DMatrix::zeros(3, 1), &bad, &one),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn degenerate_matrix_normal_returns_mean() {
        let mean = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 3.0, 0.5]);
        let tiny = DMatrix::identity(2, 2) * 1e-12;
        let mut rng = RngStream::new(1);
        let x = sample_matrix_normal(&mean, &tiny, &tiny, &mut rng).unwrap();
        assert!((&x - &mean).amax() < 1e-9);
    }

    #[test]
    fn matrix_normal_covariance_matches_kronecker() {
        let row = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 2.0]);
        let col = DMatrix::from_row_slice(2, 2, &[1.5, -0.4, -0.4, 0.8]);
        let kron = row.kronecker(&col);
        let mut rng = RngStream::new(99);
        let mean = DMatrix::zeros(2, 2);
        let n = 50_000;
        let mut acc = DMatrix::<f64>::zeros(4, 4);
        let mut acc2 = DMatrix::<f64>::zeros(4, 4);
        for _ in 0..n {
            let x = sample_matrix_normal(&mean, &row, &col, &mut rng).unwrap();
            let v = [x[(0, 0)], x[(0, 1)], x[(1, 0)], x[(1, 1)]];
            for a in 0..4 {
                for b in 0..4 {
                    let prod = v[a] * v[b];
                    acc[(a, b)] += prod;
                    acc2[(a, b)] += prod * prod;
                }
            }
        }
        for a in 0..4 {
            for b in 0..4 {
                let m = acc[(a, b)] / n as f64;
                let var = acc2[(a, b)] / n as f64 - m * m;
                let se = (var / n as f64).sqrt();
                assert!((m - kron[(a, b)]).abs() < 5.0 * se, "({a},{b}) {m} vs {}", kron[(a, b)]);
            }
        }
    }

    #[test]
    fn samplers_are_deterministic() {
        let row = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]);
        let col = DMatrix::identity(3, 3);
        let mean = DMatrix::zeros(2, 3);
        let a = sample_matrix_normal(&mean, &row, &col, &mut RngStream::new(3)).unwrap();
        let b = sample_matrix_normal(&mean, &row, &col, &mut RngStream::new(3)).unwrap();
        assert_eq!(a, b);
        let s = DMatrix::identity(2, 2);
        let w1 = sample_inverse_wishart(5.0, &s, &mut RngStream::new(4)).unwrap();
        let w2 = sample_inverse_wishart(5.0, &s, &mut RngStream::new(4)).unwrap();
        assert_eq!(w1, w2);
        let t1 = sample_truncated_normal_upper(0.0, 1.0, -6.0, &mut RngStream::new(8));
        let t2 = sample_truncated_normal_upper(0.0, 1.0, -6.0, &mut RngStream::new(8));
        assert_eq!(t1.to_bits(), t2.to_bits());
    }

    #[test]
    fn scalar_inverse_wishart_mean() {
        // P = 1: ψ / χ²_ν, mean ψ / (ν - 2), var 2ψ² / ((ν-2)²(ν-4))
        let (nu, psi) = (10.0, 1.0);
        let scale = DMatrix::from_element(1, 1, psi);
        let mut rng = RngStream::new(2024);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| sample_inverse_wishart(nu, &scale, &mut rng).unwrap()[(0, 0)])
            .sum::<f64>()
            / n as f64;
        let expected = psi / (nu - 2.0);
        let sd = (2.0 * psi * psi / ((nu - 2.0f64).powi(2) * (nu - 4.0))).sqrt();
        assert!((mean - expected).abs() < 5.0 * sd / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn inverse_wishart_output_is_spd_and_df_checked() {
        let scale = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 0.7]);
        let mut rng = RngStream::new(6);
        for _ in 0..200 {
            let w = sample_inverse_wishart(3.5, &scale, &mut rng).unwrap();
            assert!(cholesky(&w).is_ok());
        }
        assert!(sample_inverse_wishart(2.0, &scale, &mut rng).is_err());
        assert!(sample_inverse_wishart(2.5, &scale, &mut rng).is_ok());
    }

    #[test]
    fn half_normal_mean_and_support() {
        let mut rng = RngStream::new(17);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = sample_truncated_normal_upper(0.0, 1.0, 0.0, &mut rng);
            assert!(x < 0.0);
            sum += x;
        }
        let mean = sum / n as f64;
        let expected = -(2.0 / std::f64::consts::PI).sqrt();
        let sd = (1.0 - 2.0 / std::f64::consts::PI).sqrt();
        assert!((mean - expected).abs() < 5.0 * sd / (n as f64).sqrt(), "{mean}");
    }

    /// Mean and sd of N(0,1) | z < b by quadrature of the scaled density.
    fn truncated_moments_by_quadrature(b: f64) -> (f64, f64) {
        let lo = b - 40.0;
        let steps = 400_000;
        let h = (b - lo) / steps as f64;
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for k in 0..=steps {
            let x = lo + k as f64 * h;
            let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
            let f = (-0.5 * (x * x - b * b)).exp() * w;
            m0 += f;
            m1 += f * x;
            m2 += f * x * x;
        }
        let mean = m1 / m0;
        (mean, (m2 / m0 - mean * mean).sqrt())
    }

    #[test]
    fn degenerate_scale_stays_below_bound() {
        let mut rng = RngStream::new(2);
        for _ in 0..100 {
            let x = sample_truncated_normal_upper(1.526, 7e-17, 0.4, &mut rng);
            assert!(x < 0.4 && x > 0.4 - 1e-12);
            let y = sample_truncated_normal_upper(0.4, 1e-300, 0.4, &mut rng);
            assert!(y < 0.4);
        }
        assert!(sample_truncated_normal_upper(f64::NAN, 1.0, 0.0, &mut rng).is_nan());
        assert!(sample_truncated_normal_upper(0.0, 0.0, 0.0, &mut rng).is_nan());
    }

    #[test]
    fn deep_tail_draws_are_finite_and_near_bound() {
        let mut rng = RngStream::new(23);
        let (expected, sd) = truncated_moments_by_quadrature(-10.0);
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = sample_truncated_normal_upper(0.0, 1.0, -10.0, &mut rng);
            assert!(x.is_finite() && x < -10.0 && x > -12.0);
            sum += x;
        }
        let mean = sum / n as f64;
        assert!((mean - expected).abs() < 5.0 * sd / (n as f64).sqrt(), "{mean} vs {expected}");
        // far tails still terminate
        let x = sample_truncated_normal_upper(3.0, 0.5, -200.0, &mut rng);
        assert!(x < -200.0 && x.is_finite());
    }

    #[test]
    fn truncated_ecdf_within_dkw_band() {
        // DKW: P(sup|F_n - F| > eps) <= 2 exp(-2 n eps²), alpha = 0.001
        let n = 100_000;
        let eps = ((2.0f64 / 0.001).ln() / (2.0 * n as f64)).sqrt();
        for &(mean, sd, upper) in &[(0.0, 1.0, 0.3), (1.0, 2.0, -9.0), (0.0, 1.0, -4.5)] {
            let b = (upper - mean) / sd;
            let mut rng = RngStream::new(31);
            let mut xs: Vec<f64> = (0..n)
                .map(|_| sample_truncated_normal_upper(mean, sd, upper, &mut rng))
                .collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for &level in &[0.1, 0.5, 0.9] {
                // truncated quantile via the log-space tail CDF for deep bounds
                let q = if b > -8.0 {
                    mean + sd * norm_quantile(level * norm_cdf(b))
                } else {
                    // bisect on log Φ, which erfc keeps accurate this far out
                    let target = level.ln();
                    let log_cdf = |z: f64| (0.5 * erfc(-z / std::f64::consts::SQRT_2)).ln();
                    let (mut lo, mut hi) = (b - 10.0, b);
                    for _ in 0..200 {
                        let mid = 0.5 * (lo + hi);
                        if log_cdf(mid) - log_cdf(b) < target {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    mean + sd * 0.5 * (lo + hi)
                };
                let emp = xs.partition_point(|&x| x <= q) as f64 / n as f64;
                assert!((emp - level).abs() < eps, "upper {upper} level {level}: {emp}");
            }
        }
    }
}
