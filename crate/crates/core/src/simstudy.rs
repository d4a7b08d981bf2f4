//! Synthetic-data experiment: a bivariate field on a 16 × 16 lattice, a
//! held-out test set, left-censoring of the first variable at an empirical
//! percentile, and three ways of handling the censored values (fix at the
//! limit, drop the sites, or impute).

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::geometry::{distance_matrix, max_pairwise_distance, DistanceMetric, Location};
use crate::linalg::{derive_seed, sample_matrix_normal, RngStream};
use crate::mcmc::{run_chain, McmcConfig, ModelContext};
use crate::metrics::{crps_sample, interval_coverage, mean_se, quantile, rmse};
use crate::model::{corr_from_distances, DesignConvention, Hyperpriors, ModelParams, SpatialDataset};
use crate::predict::{ensemble, predictive_draws, PredictionContext, PredictionGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Setting {
    /// Censored values fixed at the detection limit.
    S1,
    /// Sites with a censored value removed.
    S2,
    /// Censored values imputed within the sampler.
    S3,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::S1, Setting::S2, Setting::S3];
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CensorLevel {
    pub name: String,
    /// Percentile of the training values of variable 1 used as the limit.
    pub percentile: f64,
}

impl CensorLevel {
    pub fn low() -> Self {
        Self {
            name: "L1".into(),
            percentile: 0.15,
        }
    }

    pub fn high() -> Self {
        Self {
            name: "L2".into(),
            percentile: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    /// Cells per side; the lattice is `{0, …, side − 1}²`.
    pub grid_side: usize,
    pub n_test: usize,
    pub truth: ModelParams,
    pub levels: Vec<CensorLevel>,
    pub settings: Vec<Setting>,
    pub replicates: usize,
    /// `phi_max` as a fraction of the largest lattice distance.
    pub phi_fraction: f64,
    pub mcmc: McmcConfig,
    pub seed: u64,
}

impl Default for SimScenario {
    fn default() -> Self {
        Self {
            grid_side: 16,
            n_test: 50,
            truth: ModelParams {
                beta: DMatrix::from_row_slice(3, 2, &[4.0, 6.0, 0.0, 0.0, 0.0, 0.0]),
                sigma: DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]),
                phi: 2.5,
                r: 0.8,
            },
            levels: vec![CensorLevel::low(), CensorLevel::high()],
            settings: Setting::ALL.to_vec(),
            replicates: 20,
            phi_fraction: 0.25,
            mcmc: McmcConfig::short(),
            seed: 2024,
        }
    }
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        let cells = self.grid_side * self.grid_side;
        if self.grid_side < 2 || self.n_test == 0 || self.n_test + 2 > cells {
            return Err(Error::domain("lattice too small for the requested test set"));
        }
        if self.replicates == 0 {
            return Err(Error::domain("at least one replicate is needed"));
        }
        for l in &self.levels {
            if !(l.percentile > 0.0 && l.percentile < 1.0) {
                return Err(Error::domain(format!("censoring percentile {} outside (0, 1)", l.percentile)));
            }
        }
        if !(self.phi_fraction > 0.0) {
            return Err(Error::domain("phi_fraction must be positive"));
        }
        self.truth.validate(f64::INFINITY)?;
        self.mcmc.validate()
    }

    pub fn lattice(&self) -> Vec<Location> {
        let s = self.grid_side;
        (0..s * s).map(|k| Location::new((k % s) as f64, (k / s) as f64)).collect()
    }

    pub fn hyperpriors(&self) -> Result<Hyperpriors> {
        Hyperpriors::with_phi_fraction(&self.lattice(), DistanceMetric::Euclidean, self.phi_fraction)
    }

    /// Centering and scaling of the coordinate columns over the full lattice.
    pub fn design(&self) -> Result<DesignConvention> {
        DesignConvention::standardized_from(&self.lattice())
    }
}

/// One realization on the whole lattice with its train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct SimField {
    pub locations: Vec<Location>,
    pub y: DMatrix<f64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Draws the field `XB + E + η` on the lattice and picks the test cells
/// uniformly without replacement.
pub fn simulate_field(scenario: &SimScenario, rng: &mut RngStream) -> Result<SimField> {
    let locations = scenario.lattice();
    let n = locations.len();
    let x = scenario.design()?.design_matrix(&locations);
    let truth = &scenario.truth;
    let corr = corr_from_distances(&distance_matrix(&locations, DistanceMetric::Euclidean)?, truth.phi);
    let row = corr * truth.r + DMatrix::identity(n, n) * (1.0 - truth.r);
    let y = sample_matrix_normal(&(&x * &truth.beta), &row, &truth.sigma, rng)?;
    let mut idx: Vec<usize> = (0..n).collect();
    let test: Vec<usize> = rand::seq::index::sample(rng, n, scenario.n_test).into_iter().collect();
    let mut is_test = vec![false; n];
    for &t in &test {
        is_test[t] = true;
    }
    idx.retain(|&i| !is_test[i]);
    let mut test = test;
    test.sort_unstable();
    Ok(SimField {
        locations,
        y,
        train: idx,
        test,
    })
}

fn names(p: usize) -> Vec<String> {
    (1..=p).map(|v| format!("V{v}")).collect()
}

/// Training set with variable 1 censored below its `percentile` empirical
/// quantile (the detection limit), and the uncensored test set.
pub fn split_and_censor(
    field: &SimField,
    percentile: f64,
    design: DesignConvention,
) -> Result<(SpatialDataset, SpatialDataset, f64)> {
    let p = field.y.ncols();
    let pick = |sites: &[usize]| -> (Vec<Location>, DMatrix<f64>) {
        (
            sites.iter().map(|&i| field.locations[i]).collect(),
            DMatrix::from_fn(sites.len(), p, |i, v| field.y[(sites[i], v)]),
        )
    };
    let (train_locs, train_y) = pick(&field.train);
    let v1: Vec<f64> = train_y.column(0).iter().copied().collect();
    let mdl = quantile(&v1, percentile);
    let n = train_locs.len();
    let censored = DMatrix::from_fn(n, p, |i, v| v == 0 && train_y[(i, 0)] < mdl);
    let limits = DMatrix::from_fn(n, p, |_, v| if v == 0 { mdl } else { f64::INFINITY });
    let mut y = train_y;
    for i in 0..n {
        if censored[(i, 0)] {
            y[(i, 0)] = mdl;
        }
    }
    let train = SpatialDataset::new(train_locs, y, censored, limits, names(p), design)?;
    let (test_locs, test_y) = pick(&field.test);
    let m = test_locs.len();
    let test = SpatialDataset::new(
        test_locs,
        test_y,
        DMatrix::from_element(m, p, false),
        DMatrix::from_element(m, p, f64::INFINITY),
        names(p),
        design,
    )?;
    Ok((train, test, mdl))
}

/// Training data as seen under each setting.
pub fn apply_setting(train: &SpatialDataset, setting: Setting) -> Result<SpatialDataset> {
    match setting {
        Setting::S1 => {
            let mut out = train.clone();
            for (i, v) in train.censored_cells() {
                out.y[(i, v)] = train.limits[(i, v)];
                out.censored[(i, v)] = false;
            }
            Ok(out)
        }
        Setting::S2 => train.select_sites(&train.fully_observed_sites()),
        Setting::S3 => Ok(train.clone()),
    }
}

/// Posterior means and test-set scores of one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub replicate: usize,
    /// `(name, posterior mean)` in the summary order of the sampler.
    pub estimates: Vec<(String, f64)>,
    /// Mean CRPS over test cells, per variable.
    pub crps: Vec<f64>,
    pub coverage90: Vec<f64>,
    pub coverage95: Vec<f64>,
    pub n_censored: usize,
}

/// Fits one training set and scores its predictions at the test sites.
pub fn fit_and_score(
    train: &SpatialDataset,
    test: &SpatialDataset,
    hyper: Hyperpriors,
    config: &McmcConfig,
    predict_seed: u64,
    replicate: usize,
) -> Result<ReplicateResult> {
    let ctx = ModelContext::new(train, hyper, DistanceMetric::Euclidean)?.with_config(config);
    let out = run_chain(&ctx, config, None)?;
    let estimates = out
        .samples
        .parameter_series()
        .into_iter()
        .map(|(name, xs)| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            (name, m)
        })
        .collect();
    let grid = PredictionGrid::new(test.locations.clone(), &train.design, None)?;
    let pctx = PredictionContext::new(&train.locations, &grid, DistanceMetric::Euclidean)?;
    let draws = predictive_draws(&out.samples, &pctx, predict_seed)?;
    let (m, p) = (test.n_sites(), test.n_vars());
    let mut crps = Vec::with_capacity(p);
    let mut coverage90 = Vec::with_capacity(p);
    let mut coverage95 = Vec::with_capacity(p);
    for v in 0..p {
        let truths: Vec<f64> = test.y.column(v).iter().copied().collect();
        crps.push((0..m).map(|i| crps_sample(&ensemble(&draws, i, v), truths[i])).sum::<f64>() / m as f64);
        let mat = DMatrix::from_fn(draws.len(), m, |s, i| draws[s][(i, v)]);
        coverage90.push(interval_coverage(&mat, &truths, 0.90));
        coverage95.push(interval_coverage(&mat, &truths, 0.95));
    }
    Ok(ReplicateResult {
        replicate,
        estimates,
        crps,
        coverage90,
        coverage95,
        n_censored: train.censored_cells().len(),
    })
}

/// Results of all replicates for one censoring level and setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub level: String,
    pub setting: Setting,
    pub results: Vec<ReplicateResult>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResults {
    pub arms: Vec<Arm>,
    pub truth: Vec<(String, f64)>,
}

/// Seed of the sampler or predictor for one replicate, level and setting.
fn job_seed(base: u64, replicate: usize, level: usize, setting: Setting, purpose: u64) -> u64 {
    let tag = (level as u64) << 8 | (setting as u64) << 4 | purpose;
    derive_seed(derive_seed(base, replicate as u64 + 1), tag)
}

/// Runs every (replicate, level, setting) fit. The field of replicate `k`
/// is shared by all levels and settings. Failed fits are logged and left
/// out of the aggregates.
pub fn run_study(scenario: &SimScenario) -> Result<StudyResults> {
    scenario.validate()?;
    let design = scenario.design()?;
    let hyper = scenario.hyperpriors()?;
    let base = RngStream::new(scenario.seed);
    let fields: Vec<SimField> = (0..scenario.replicates)
        .map(|k| simulate_field(scenario, &mut base.substream(k as u64)))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize, Setting)> = (0..scenario.levels.len())
        .flat_map(|l| scenario.settings.iter().flat_map(move |&s| (0..scenario.replicates).map(move |k| (l, k, s))))
        .collect();
    let outcomes: Vec<Result<ReplicateResult>> = jobs
        .par_iter()
        .map(|&(l, k, s)| {
            let (train, test, _) = split_and_censor(&fields[k], scenario.levels[l].percentile, design)?;
            let data = apply_setting(&train, s)?;
            let config = McmcConfig {
                seed: job_seed(scenario.seed, k, l, s, 1),
                ..scenario.mcmc.clone()
            };
            let res = fit_and_score(&data, &test, hyper, &config, job_seed(scenario.seed, k, l, s, 2), k);
            match &res {
                Ok(_) => log::info!("{} {s} replicate {k} done", scenario.levels[l].name),
                Err(e) => log::warn!("{} {s} replicate {k} failed: {e}", scenario.levels[l].name),
            }
            res
        })
        .collect();

    let mut arms: Vec<Arm> = Vec::new();
    for (&(l, _, s), res) in jobs.iter().zip(outcomes) {
        let name = &scenario.levels[l].name;
        let pos = match arms.iter().position(|a| &a.level == name && a.setting == s) {
            Some(p) => p,
            None => {
                arms.push(Arm {
                    level: name.clone(),
                    setting: s,
                    results: Vec::new(),
                    failures: 0,
                });
                arms.len() - 1
            }
        };
        match res {
            Ok(r) => arms[pos].results.push(r),
            Err(_) => arms[pos].failures += 1,
        }
    }
    for a in &arms {
        if a.failures > 0 {
            log::warn!("{} {}: {} of {} replicates failed", a.level, a.setting, a.failures, scenario.replicates);
        }
    }
    Ok(StudyResults {
        arms,
        truth: truth_series(&scenario.truth),
    })
}

/// True parameter values named as in the sampler summaries.
pub fn truth_series(t: &ModelParams) -> Vec<(String, f64)> {
    let (q, p) = t.beta.shape();
    let mut out = Vec::new();
    for c in 0..q {
        for v in 0..p {
            out.push((format!("beta_{},{}", v + 1, c + 1), t.beta[(c, v)]));
        }
    }
    for v in 0..p {
        out.push((format!("Sigma_{},{}", v + 1, v + 1), t.sigma[(v, v)]));
    }
    for i in 0..p {
        for j in (i + 1)..p {
            out.push((format!("Sigma_{},{}", i + 1, j + 1), t.sigma[(i, j)]));
        }
    }
    out.push(("phi".into(), t.phi));
    out.push(("r".into(), t.r));
    out
}

/// One cell of a score table: value and standard error across replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCell {
    pub level: String,
    pub setting: Setting,
    pub quantity: String,
    pub value: f64,
    pub se: f64,
}

impl StudyResults {
    pub fn arm(&self, level: &str, setting: Setting) -> Option<&Arm> {
        self.arms.iter().find(|a| a.level == level && a.setting == setting)
    }

    /// Parameter estimation error (mean absolute error of posterior means).
    pub fn rmse_table(&self) -> Vec<ScoreCell> {
        let mut out = Vec::new();
        for a in self.arms.iter().filter(|a| !a.results.is_empty()) {
            for (j, (name, truth)) in self.truth.iter().enumerate() {
                let est: Vec<f64> = a.results.iter().map(|r| r.estimates[j].1).collect();
                let e = rmse(&est, *truth);
                out.push(cell(a, name, e.value, e.se));
            }
        }
        out
    }

    pub fn crps_table(&self) -> Vec<ScoreCell> {
        self.per_variable(|r| &r.crps, "")
    }

    pub fn coverage_table(&self) -> Vec<ScoreCell> {
        let mut out = self.per_variable(|r| &r.coverage90, "90%:");
        out.extend(self.per_variable(|r| &r.coverage95, "95%:"));
        out
    }

    fn per_variable(&self, f: impl Fn(&ReplicateResult) -> &Vec<f64>, prefix: &str) -> Vec<ScoreCell> {
        let mut out = Vec::new();
        for a in self.arms.iter().filter(|a| !a.results.is_empty()) {
            let p = f(&a.results[0]).len();
            for v in 0..p {
                let xs: Vec<f64> = a.results.iter().map(|r| f(r)[v]).collect();
                let (m, se) = mean_se(&xs);
                out.push(cell(a, &format!("{prefix}V{}", v + 1), m, se));
            }
        }
        out
    }

    /// Writes `table1_rmse.csv`, `table2_crps.csv` and `table3_coverage.csv`
    /// with one row per (level, quantity) and a value/SE column pair per
    /// setting.
    pub fn write_tables(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_wide(&dir.join("table1_rmse.csv"), "parameter", &self.rmse_table())?;
        write_wide(&dir.join("table2_crps.csv"), "variable", &self.crps_table())?;
        write_wide(&dir.join("table3_coverage.csv"), "interval_variable", &self.coverage_table())?;
        let mut w = csv::Writer::from_path(dir.join("replicates.csv"))?;
        w.write_record(["level", "setting", "fit", "failures"])?;
        for a in &self.arms {
            w.write_record([a.level.clone(), a.setting.to_string(), a.results.len().to_string(), a.failures.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn cell(a: &Arm, quantity: &str, value: f64, se: f64) -> ScoreCell {
    ScoreCell {
        level: a.level.clone(),
        setting: a.setting,
        quantity: quantity.to_string(),
        value,
        se,
    }
}

fn write_wide(path: &Path, label: &str, cells: &[ScoreCell]) -> Result<()> {
    let mut settings: Vec<Setting> = cells.iter().map(|c| c.setting).collect();
    settings.sort();
    settings.dedup();
    let mut rows: Vec<(String, String)> = Vec::new();
    for c in cells {
        let key = (c.level.clone(), c.quantity.clone());
        if !rows.contains(&key) {
            rows.push(key);
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["level".to_string(), label.to_string()];
    for s in &settings {
        header.push(s.to_string());
        header.push(format!("{s}_se"));
    }
    w.write_record(&header)?;
    for (level, q) in rows {
        let mut rec = vec![level.clone(), q.clone()];
        for s in &settings {
            match cells.iter().find(|c| c.level == level && c.quantity == q && c.setting == *s) {
                Some(c) => {
                    rec.push(format!("{:.3}", c.value));
                    rec.push(format!("{:.3}", c.se));
                }
                None => {
                    rec.push("NA".into());
                    rec.push("NA".into());
                }
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Largest lattice distance, `Δ*`.
pub fn lattice_diameter(scenario: &SimScenario) -> Result<f64> {
    max_pairwise_distance(&scenario.lattice(), DistanceMetric::Euclidean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lattice_and_priors() {
        let s = SimScenario::default();
        let l = s.lattice();
        assert_eq!(l.len(), 256);
        assert_eq!(l[17], Location::new(1.0, 1.0));
        assert_relative_eq!(lattice_diameter(&s).unwrap(), 15.0 * 2f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(s.hyperpriors().unwrap().phi_max, 0.25 * 15.0 * 2f64.sqrt(), epsilon = 1e-12);
        let x = s.design().unwrap().design_matrix(&l);
        assert!(x.column(1).mean().abs() < 1e-12);
    }

    #[test]
    fn censored_counts_follow_interpolated_percentile() {
        let s = SimScenario::default();
        let field = simulate_field(&s, &mut RngStream::new(3)).unwrap();
        assert_eq!(field.train.len(), 206);
        assert_eq!(field.test.len(), 50);
        let design = s.design().unwrap();
        // h = 205 p: p = 0.15 puts the limit between the 31st and 32nd order
        // statistics, p = 0.45 between the 93rd and 94th
        let (l1, _, _) = split_and_censor(&field, 0.15, design).unwrap();
        assert_eq!(l1.censored_count(0), 31);
        assert_eq!(l1.censored_count(1), 0);
        let (l2, test, mdl) = split_and_censor(&field, 0.45, design).unwrap();
        assert_eq!(l2.censored_count(0), 93);
        assert_eq!(test.censored_cells().len(), 0);
        for (i, _) in l2.censored_cells() {
            assert_eq!(l2.y[(i, 0)], mdl);
            assert!(field.y[(field.train[i], 0)] < mdl);
        }
    }

    #[test]
    fn settings_transform_training_data() {
        let s = SimScenario::default();
        let field = simulate_field(&s, &mut RngStream::new(4)).unwrap();
        let (train, _, mdl) = split_and_censor(&field, 0.15, s.design().unwrap()).unwrap();
        let s1 = apply_setting(&train, Setting::S1).unwrap();
        assert_eq!(s1.censored_cells().len(), 0);
        let min = s1.y.column(0).min();
        assert_eq!(min, mdl);
        let s2 = apply_setting(&train, Setting::S2).unwrap();
        assert_eq!(s2.n_sites(), 206 - 31);
        assert_eq!(apply_setting(&train, Setting::S3).unwrap(), train);

        for st in Setting::ALL {
            assert_eq!(apply_setting(&s1, st).unwrap(), s1);
        }
    }

    #[test]
    fn field_is_reproducible() {
        let s = SimScenario::default();
        let a = simulate_field(&s, &mut RngStream::new(9)).unwrap();
        let b = simulate_field(&s, &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn field_moments_match_truth() {
        let s = SimScenario::default();
        let base = RngStream::new(11);
        let k = 200;
        let mut means2 = Vec::new();
        let mut cross = Vec::new();
        for rep in 0..k {
            let f = simulate_field(&s, &mut base.substream(rep)).unwrap();
            means2.push(f.y.column(1).mean());
            // one fixed cell per replicate gives independent pairs
            let (a, b) = (f.y[(100, 0)] - 4.0, f.y[(100, 1)] - 6.0);
            cross.push(a * b);
        }
        let (m, se) = mean_se(&means2);
        assert!((m - 6.0).abs() < 4.0 * se, "{m} ± {se}");
        let (c, se) = mean_se(&cross);
        assert!((c - 1.0).abs() < 4.0 * se, "{c} ± {se}");
    }

    #[test]
    fn small_study_runs_end_to_end() {
        let s = SimScenario {
            grid_side: 6,
            n_test: 6,
            replicates: 2,
            levels: vec![CensorLevel::high()],
            mcmc: McmcConfig {
                n_iter: 300,
                burn_in: 100,
                thin: 5,
                ..McmcConfig::default()
            },
            ..SimScenario::default()
        };
        let res = run_study(&s).unwrap();
        assert_eq!(res.arms.len(), 3);
        for a in &res.arms {
            assert_eq!(a.results.len() + a.failures, 2);
        }
        let rm = res.rmse_table();
        assert_eq!(rm.len(), 3 * 11);
        assert_eq!(res.coverage_table().len(), 3 * 4);
        let again = run_study(&s).unwrap();
        assert_eq!(res, again);
    }
}
