//! Scores for comparing fits: absolute-error summaries of point estimates,
//! the sample-based continuous ranked probability score, and empirical
//! coverage of central prediction intervals.

use nalgebra::DMatrix;

/// Empirical quantile of sorted data by linear interpolation between order
/// statistics (`h = (n − 1) p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

/// Mean and sample standard deviation (`n − 1` denominator, 0 for `n = 1`).
pub fn sample_mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let (m, sd) = sample_mean_sd(values);
    (m, sd / (values.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSummary {
    pub value: f64,
    pub se: f64,
}

/// Replicate-averaged root squared error of point estimates of one scalar:
/// the mean of `|estimate_k − truth|` with its standard error.
pub fn rmse(estimates: &[f64], truth: f64) -> ErrorSummary {
    let errs: Vec<f64> = estimates.iter().map(|e| ((e - truth) * (e - truth)).sqrt()).collect();
    let (value, se) = mean_se(&errs);
    ErrorSummary { value, se }
}

/// CRPS of an ensemble against an observation,
/// `(1/S) Σ|Xᵢ − y| − (1/(2S²)) ΣᵢΣⱼ|Xᵢ − Xⱼ|`.
///
/// This is the exact integral of `(F̂(x) − 1{y ≤ x})²` for the ensemble's
/// empirical CDF `F̂`. The pairwise sum is evaluated in `O(S log S)` from
/// the order statistics.
pub fn crps_sample(ensemble: &[f64], y: f64) -> f64 {
    assert!(!ensemble.is_empty(), "CRPS needs at least one draw");
    let s = ensemble.len() as f64;
    let mut sorted = ensemble.to_vec();
    sorted.sort_by(f64::total_cmp);
    let abs_dev = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / s;
    // ΣᵢΣⱼ|Xᵢ − Xⱼ| = 2 Σₖ (2k − S − 1) X₍ₖ₎ with 1-based ranks k
    let pair = 2.0
        * sorted
            .iter()
            .enumerate()
            .map(|(k, x)| (2.0 * (k as f64 + 1.0) - s - 1.0) * x)
            .sum::<f64>();
    (abs_dev - pair / (2.0 * s * s)).max(0.0)
}

/// Fraction of test points whose truth lies in the closed central interval
/// `[q((1 − level)/2), q((1 + level)/2)]` of its draws. `draws` is `S × T`.
pub fn interval_coverage(draws: &DMatrix<f64>, truths: &[f64], level: f64) -> f64 {
    assert_eq!(draws.ncols(), truths.len(), "one truth per column");
    assert!(draws.nrows() >= 2, "coverage needs at least two draws");
    let hits = truths
        .iter()
        .enumerate()
        .filter(|&(t, &truth)| {
            let mut col: Vec<f64> = draws.column(t).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            let lo = quantile_sorted(&col, (1.0 - level) / 2.0);
            let hi = quantile_sorted(&col, (1.0 + level) / 2.0);
            lo <= truth && truth <= hi
        })
        .count();
    hits as f64 / truths.len() as f64
}
