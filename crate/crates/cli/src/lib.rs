//! Subcommands of the `mvspatial` tool. Each is a function of its input
//! files and the run configuration, so reruns reproduce their outputs byte
//! for byte.

use std::path::{Path, PathBuf};

use mvspatial::eda::{ols_residuals, pairwise_correlations, semivariogram, VariogramBins};
use mvspatial::geometry::{make_grid_filtered, max_pairwise_distance, Location, RegionPartition};
use mvspatial::io::{
    read_draws, read_locations, read_regions, read_stations, write_correlations, write_draws, write_predictions,
    write_region_table, write_residuals, write_summary, write_trace, write_variogram, FitRecord, IngestOptions,
    RunConfig,
};
use mvspatial::linalg::derive_seed;
use mvspatial::mcmc::{run_chain, ChainOutput, ModelContext};
use mvspatial::metrics::{quantile, sample_mean_sd};
use mvspatial::model::SpatialDataset;
use mvspatial::predict::{
    ensemble, predictive_draws, region_means, summarize_predictive, PredictionContext, PredictionGrid,
    PredictiveSummary, RegionMean,
};
use mvspatial::simstudy::{run_study, StudyResults};
use mvspatial::{Error, Result};
use rayon::prelude::*;

/// Stream index of the prediction seed, derived from the sampler seed.
pub const PREDICT_STREAM: u64 = 0x5052_4544;

pub const DRAWS_FILE: &str = "draws.csv";

pub fn load_dataset(stations: &Path, cfg: &RunConfig) -> Result<SpatialDataset> {
    let data = read_stations(stations, &IngestOptions::from_config(cfg)?)?;
    log::info!("{}", mvspatial::io::dataset_summary(&data));
    Ok(data)
}

/// Prediction sites: an explicit CSV, else the cells of a regular grid at
/// `grid_resolution` whose centers fall inside the boundary (or, without a
/// boundary, inside any region).
pub fn build_grid(
    cfg: &RunConfig,
    grid_csv: Option<&Path>,
    boundary: Option<&RegionPartition>,
    regions: Option<&RegionPartition>,
) -> Result<Vec<Location>> {
    if let Some(p) = grid_csv {
        return read_locations(p);
    }
    let part = boundary
        .or(regions)
        .ok_or_else(|| Error::domain("no prediction grid: pass --grid, --boundary or --regions"))?;
    let bbox = part.bbox().ok_or_else(|| Error::domain("boundary has no polygons"))?;
    make_grid_filtered(bbox, cfg.grid_resolution, |l| part.contains(l))
}

pub struct FitOutcome {
    pub data: SpatialDataset,
    pub output: ChainOutput,
}

/// Runs the sampler and writes `trace.csv`, `summary.csv`, `summary.txt` and
/// the draws sidecar. `n_prediction_sites` only matters when the
/// inverse-Wishart df is set to count prediction sites.
pub fn cmd_fit(stations: &Path, cfg: &RunConfig, n_prediction_sites: Option<usize>, out: &Path) -> Result<FitOutcome> {
    let data = load_dataset(stations, cfg)?;
    let metric = cfg.distance_metric()?;
    let hyper = cfg.hyperpriors(&data.locations, metric)?;
    let mut mcmc = cfg.mcmc();
    if mcmc.nu_includes_predictions {
        match n_prediction_sites {
            Some(m) => mcmc.n_prediction_sites = m,
            None => log::warn!("nu_includes_predictions without a grid: M = 0"),
        }
    }
    let ctx = ModelContext::new(&data, hyper, metric)?.with_config(&mcmc);
    let output = run_chain(&ctx, &mcmc, None)?;
    std::fs::create_dir_all(out)?;
    write_trace(&out.join("trace.csv"), &output.samples)?;
    write_summary(out, &output.samples, &output.diagnostics)?;
    write_draws(
        &out.join(DRAWS_FILE),
        &FitRecord {
            locations: data.locations.clone(),
            metric,
            design: data.design,
            samples: output.samples.clone(),
        },
    )?;
    Ok(FitOutcome { data, output })
}

pub struct PredictOutcome {
    pub grid: PredictionGrid,
    pub summary: PredictiveSummary,
    pub regions: Vec<RegionMean>,
}

/// Predictive surface (`predictions.csv`) and, with regions, the region
/// table (`regions.csv`) from a stored fit.
pub fn cmd_predict(fit_dir: &Path, cfg: &RunConfig, locations: Vec<Location>, regions: Option<&RegionPartition>, out: &Path) -> Result<PredictOutcome> {
    let fit = read_draws(&fit_dir.join(DRAWS_FILE))?;
    let grid = PredictionGrid::new(locations, &fit.design, regions)?;
    let pctx = PredictionContext::new(&fit.locations, &grid, fit.metric)?;
    let draws = predictive_draws(&fit.samples, &pctx, derive_seed(cfg.seed, PREDICT_STREAM))?;
    let summary = summarize_predictive(&draws)?;
    std::fs::create_dir_all(out)?;
    let names = &fit.samples.variable_names;
    write_predictions(&out.join("predictions.csv"), &grid, &summary, names)?;
    let means = if regions.is_some() {
        let m = region_means(&draws, &grid)?;
        write_region_table(&out.join("regions.csv"), &m, names)?;
        m
    } else {
        Vec::new()
    };
    Ok(PredictOutcome {
        grid,
        summary,
        regions: means,
    })
}

/// One held-out site and variable.
#[derive(Debug, Clone, PartialEq)]
pub struct CvRow {
    pub site: usize,
    pub variable: usize,
    pub observed: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl CvRow {
    pub fn covered(&self) -> bool {
        self.lower <= self.observed && self.observed <= self.upper
    }

    pub fn residual(&self) -> f64 {
        self.observed - self.mean
    }
}

/// Leave-one-site-out over fully observed sites: refit without the site
/// (censored sites stay in), predict it, and record the 95% interval and
/// residual. Writes `cv.csv` and `cv_summary.csv`.
pub fn cmd_cv(stations: &Path, cfg: &RunConfig, out: &Path) -> Result<Vec<CvRow>> {
    let data = load_dataset(stations, cfg)?;
    let rows = crossvalidate(&data, cfg)?;
    std::fs::create_dir_all(out)?;
    write_cv(out, &data, &rows)?;
    Ok(rows)
}

pub fn crossvalidate(data: &SpatialDataset, cfg: &RunConfig) -> Result<Vec<CvRow>> {
    let sites = data.fully_observed_sites();
    if sites.len() < 2 {
        return Err(Error::domain("cross-validation needs at least two fully observed sites"));
    }
    let metric = cfg.distance_metric()?;
    let hyper = cfg.hyperpriors(&data.locations, metric)?;
    let folds: Vec<Result<Vec<CvRow>>> = sites
        .par_iter()
        .map(|&site| {
            let train = data.without_site(site)?;
            let mcmc = mvspatial::mcmc::McmcConfig {
                seed: derive_seed(cfg.seed, site as u64 + 1),
                ..cfg.cv_mcmc()
            };
            let ctx = ModelContext::new(&train, hyper, metric)?.with_config(&mcmc);
            let fit = run_chain(&ctx, &mcmc, None)?;
            let grid = PredictionGrid::new(vec![data.locations[site]], &data.design, None)?;
            let pctx = PredictionContext::new(&train.locations, &grid, metric)?;
            let draws = predictive_draws(&fit.samples, &pctx, derive_seed(mcmc.seed, PREDICT_STREAM))?;
            log::info!("fold for row {} done", site + 1);
            Ok((0..data.n_vars())
                .map(|v| {
                    let ens = ensemble(&draws, 0, v);
                    CvRow {
                        site,
                        variable: v,
                        observed: data.y[(site, v)],
                        mean: sample_mean_sd(&ens).0,
                        lower: quantile(&ens, 0.025),
                        upper: quantile(&ens, 0.975),
                    }
                })
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for f in folds {
        rows.extend(f?);
    }
    Ok(rows)
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn write_cv(out: &Path, data: &SpatialDataset, rows: &[CvRow]) -> Result<()> {
    let mut w = csv_writer(&out.join("cv.csv"))?;
    w.write_record([
        "row", "lon", "lat", "variable", "observed_log", "mean_log", "q2.5_log", "q97.5_log", "covered", "residual",
    ])?;
    for r in rows {
        let loc = data.locations[r.site];
        w.write_record([
            (r.site + 1).to_string(),
            f6(loc.x),
            f6(loc.y),
            data.variable_names[r.variable].clone(),
            f6(r.observed),
            f6(r.mean),
            f6(r.lower),
            f6(r.upper),
            (r.covered() as u8).to_string(),
            f6(r.residual()),
        ])?;
    }
    w.flush()?;
    let mut w = csv_writer(&out.join("cv_summary.csv"))?;
    w.write_record(["variable", "n", "coverage95"])?;
    for (v, name) in data.variable_names.iter().enumerate() {
        let mine: Vec<&CvRow> = rows.iter().filter(|r| r.variable == v).collect();
        let cov = mine.iter().filter(|r| r.covered()).count() as f64 / mine.len() as f64;
        w.write_record([name.clone(), mine.len().to_string(), format!("{cov:.3}")])?;
    }
    w.flush()?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

/// Synthetic study; writes the score tables into `out`.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<StudyResults> {
    let scenario = cfg.scenario()?;
    let res = run_study(&scenario)?;
    res.write_tables(out)?;
    Ok(res)
}

/// Files written by [`cmd_eda`].
pub struct EdaOutcome {
    pub variograms: Vec<PathBuf>,
    pub correlations: PathBuf,
    pub residuals: PathBuf,
}

/// OLS residuals of the complete cases, their correlations, and one
/// semivariogram file per variable.
pub fn cmd_eda(stations: &Path, cfg: &RunConfig, out: &Path) -> Result<EdaOutcome> {
    let data = load_dataset(stations, cfg)?;
    let metric = cfg.distance_metric()?;
    let ols = ols_residuals(&data)?;
    let locs: Vec<Location> = ols.sites.iter().map(|&i| data.locations[i]).collect();
    std::fs::create_dir_all(out)?;
    let max_d = match cfg.variogram_max_distance {
        Some(d) => d,
        None => 0.5 * max_pairwise_distance(&locs, metric)?,
    };
    let bins = VariogramBins::equal_width(max_d, cfg.variogram_bins)?;
    let mut variograms = Vec::new();
    for (v, name) in data.variable_names.iter().enumerate() {
        let vals: Vec<f64> = ols.residuals.column(v).iter().copied().collect();
        let path = out.join(format!("variogram_{}.csv", file_stem(name)));
        write_variogram(&path, &semivariogram(&vals, &locs, metric, &bins)?)?;
        variograms.push(path);
    }
    let correlations = out.join("correlations.csv");
    write_correlations(&correlations, &pairwise_correlations(&ols.residuals)?, &data.variable_names)?;
    let residuals = out.join("residuals.csv");
    write_residuals(&residuals, &ols, &data)?;
    Ok(EdaOutcome {
        variograms,
        correlations,
        residuals,
    })
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn load_regions(path: Option<&Path>) -> Result<Option<RegionPartition>> {
    path.map(read_regions).transpose()
}

/// `error[<category>]: <message>` on one line.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error[{}]: {msg}", e.category())
}
