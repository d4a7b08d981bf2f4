//! File formats: the run configuration, station CSVs, polygon files, the
//! posterior draws sidecar, and the CSV/text reports.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::eda::{log_transform, OlsResult, VariogramBin};
use crate::geometry::{DistanceMetric, Location, Polygon, Region, RegionPartition, DEFAULT_EARTH_RADIUS_KM};
use crate::mcmc::{ChainDiagnostics, Draw, McmcConfig, PosteriorSamples};
use crate::model::{DesignConvention, Hyperpriors, ModelParams, SpatialDataset};
use crate::predict::{PredictionGrid, PredictiveSummary, RegionMean};
use crate::simstudy::{CensorLevel, SimScenario, Setting};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Configuration

/// Every tunable of the command-line tool. Defaults are the settings of the
/// data application and the synthetic study.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// `geodesic` or `euclidean`.
    pub metric: String,
    pub earth_radius_km: f64,
    pub standardize_covariates: bool,
    /// Detection limit (natural scale) for censored rows without a limit column.
    pub mdl: Option<f64>,

    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub adapt_target: f64,
    pub adapt_window: usize,
    pub adapt_gain: f64,
    pub initial_step_sd: f64,
    pub nu_includes_predictions: bool,

    pub beta_prior_sd: f64,
    pub iw_df: f64,
    pub iw_scale: f64,
    pub phi_max_fraction: f64,
    pub phi_max: Option<f64>,

    pub grid_resolution: f64,

    pub cv_full_chains: bool,
    pub cv_n_iter: usize,
    pub cv_burn_in: usize,
    pub cv_thin: usize,

    pub variogram_bins: usize,
    pub variogram_max_distance: Option<f64>,

    pub sim_grid_side: usize,
    pub sim_n_test: usize,
    pub sim_replicates: usize,
    pub sim_levels: Vec<f64>,
    pub sim_settings: Vec<Setting>,
    pub sim_n_iter: usize,
    pub sim_burn_in: usize,
    pub sim_thin: usize,
    pub sim_phi_fraction: f64,
    /// Row-major `3 × P`.
    pub sim_beta: Vec<f64>,
    /// Row-major `P × P`.
    pub sim_sigma: Vec<f64>,
    pub sim_phi: f64,
    pub sim_r: f64,

    /// Worker threads; 0 uses every available core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimScenario::default();
        let full = McmcConfig::default();
        let short = McmcConfig::short();
        Self {
            seed: 1,
            metric: "geodesic".into(),
            earth_radius_km: DEFAULT_EARTH_RADIUS_KM,
            standardize_covariates: false,
            mdl: None,
            n_iter: full.n_iter,
            burn_in: full.burn_in,
            thin: full.thin,
            adapt_target: full.adapt_target,
            adapt_window: full.adapt_window,
            adapt_gain: full.adapt_gain,
            initial_step_sd: full.initial_step_sd,
            nu_includes_predictions: false,
            beta_prior_sd: Hyperpriors::DEFAULT_BETA_PRIOR_SD,
            iw_df: Hyperpriors::DEFAULT_IW_DF,
            iw_scale: Hyperpriors::DEFAULT_IW_SCALE,
            phi_max_fraction: 0.5,
            phi_max: None,
            grid_resolution: 0.15,
            cv_full_chains: false,
            cv_n_iter: short.n_iter,
            cv_burn_in: short.burn_in,
            cv_thin: short.thin,
            variogram_bins: crate::eda::DEFAULT_VARIOGRAM_BINS,
            variogram_max_distance: None,
            sim_grid_side: sim.grid_side,
            sim_n_test: sim.n_test,
            sim_replicates: sim.replicates,
            sim_levels: sim.levels.iter().map(|l| l.percentile).collect(),
            sim_settings: sim.settings.clone(),
            sim_n_iter: sim.mcmc.n_iter,
            sim_burn_in: sim.mcmc.burn_in,
            sim_thin: sim.mcmc.thin,
            sim_phi_fraction: sim.phi_fraction,
            sim_beta: row_major(&sim.truth.beta),
            sim_sigma: row_major(&sim.truth.sigma),
            sim_phi: sim.truth.phi,
            sim_r: sim.truth.r,
            workers: 0,
        }
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map_or("none".into(), |v| v.to_string())
}

fn parse_err(key: &str, value: &str, line: usize) -> Error {
    Error::Parse(format!("line {line}: invalid value `{value}` for `{key}`"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| parse_err(key, value, line))
}

fn opt_num(key: &str, value: &str, line: usize) -> Result<Option<f64>> {
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        num(key, value, line).map(Some)
    }
}

fn boolean(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(parse_err(key, value, line)),
    }
}

fn list(key: &str, value: &str, line: usize) -> Result<Vec<f64>> {
    value.split(',').map(|s| num(key, s.trim(), line)).collect()
}

impl RunConfig {
    /// `(key, value, comment)` in file order.
    fn entries(&self) -> Vec<(&'static str, String, &'static str)> {
        vec![
            ("seed", self.seed.to_string(), "master seed"),
            ("metric", self.metric.clone(), "geodesic | euclidean"),
            ("earth_radius_km", self.earth_radius_km.to_string(), "sphere radius for geodesic distances"),
            ("standardize_covariates", self.standardize_covariates.to_string(), "center/scale lon and lat columns of X"),
            ("mdl", opt(&self.mdl), "global detection limit (natural scale) when no <var>_limit column"),
            ("n_iter", self.n_iter.to_string(), "sampler iterations"),
            ("burn_in", self.burn_in.to_string(), ""),
            ("thin", self.thin.to_string(), ""),
            ("adapt_target", self.adapt_target.to_string(), "target acceptance for phi and r"),
            ("adapt_window", self.adapt_window.to_string(), "iterations between step-size updates"),
            ("adapt_gain", self.adapt_gain.to_string(), ""),
            ("initial_step_sd", self.initial_step_sd.to_string(), "logit-scale random-walk sd"),
            ("nu_includes_predictions", self.nu_includes_predictions.to_string(), "add 2M to the inverse-Wishart df"),
            ("beta_prior_sd", self.beta_prior_sd.to_string(), ""),
            ("iw_df", self.iw_df.to_string(), ""),
            ("iw_scale", self.iw_scale.to_string(), "prior scale matrix is iw_scale * I"),
            ("phi_max_fraction", self.phi_max_fraction.to_string(), "phi ~ U(0, fraction * max distance)"),
            ("phi_max", opt(&self.phi_max), "explicit upper bound, overrides the fraction"),
            ("grid_resolution", self.grid_resolution.to_string(), "prediction cell size in coordinate units"),
            ("cv_full_chains", self.cv_full_chains.to_string(), "cross-validation uses n_iter/burn_in/thin"),
            ("cv_n_iter", self.cv_n_iter.to_string(), ""),
            ("cv_burn_in", self.cv_burn_in.to_string(), ""),
            ("cv_thin", self.cv_thin.to_string(), ""),
            ("variogram_bins", self.variogram_bins.to_string(), ""),
            ("variogram_max_distance", opt(&self.variogram_max_distance), "none = half the largest distance"),
            ("sim_grid_side", self.sim_grid_side.to_string(), "synthetic lattice is side x side"),
            ("sim_n_test", self.sim_n_test.to_string(), ""),
            ("sim_replicates", self.sim_replicates.to_string(), ""),
            ("sim_levels", join(&self.sim_levels), "censoring percentiles of variable 1"),
            ("sim_settings", join(&self.sim_settings), "S1 fix at limit, S2 drop sites, S3 impute"),
            ("sim_n_iter", self.sim_n_iter.to_string(), ""),
            ("sim_burn_in", self.sim_burn_in.to_string(), ""),
            ("sim_thin", self.sim_thin.to_string(), ""),
            ("sim_phi_fraction", self.sim_phi_fraction.to_string(), ""),
            ("sim_beta", join(&self.sim_beta), "row-major 3 x P"),
            ("sim_sigma", join(&self.sim_sigma), "row-major P x P"),
            ("sim_phi", self.sim_phi.to_string(), ""),
            ("sim_r", self.sim_r.to_string(), ""),
            ("workers", self.workers.to_string(), "0 = all cores"),
        ]
    }

    /// The configuration as a file that [`RunConfig::parse`] reads back.
    pub fn to_config_string(&self) -> String {
        let mut s = String::from("# mvspatial configuration\n");
        for (k, v, c) in self.entries() {
            if c.is_empty() {
                let _ = writeln!(s, "{k} = {v}");
            } else {
                let _ = writeln!(s, "{k} = {v}  # {c}");
            }
        }
        s
    }

    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = num(key, v, line)?,
            "metric" => match v {
                "geodesic" | "euclidean" => self.metric = v.into(),
                _ => return Err(parse_err(key, v, line)),
            },
            "earth_radius_km" => self.earth_radius_km = num(key, v, line)?,
            "standardize_covariates" => self.standardize_covariates = boolean(key, v, line)?,
            "mdl" => self.mdl = opt_num(key, v, line)?,
            "n_iter" => self.n_iter = num(key, v, line)?,
            "burn_in" => self.burn_in = num(key, v, line)?,
            "thin" => self.thin = num(key, v, line)?,
            "adapt_target" => self.adapt_target = num(key, v, line)?,
            "adapt_window" => self.adapt_window = num(key, v, line)?,
            "adapt_gain" => self.adapt_gain = num(key, v, line)?,
            "initial_step_sd" => self.initial_step_sd = num(key, v, line)?,
            "nu_includes_predictions" => self.nu_includes_predictions = boolean(key, v, line)?,
            "beta_prior_sd" => self.beta_prior_sd = num(key, v, line)?,
            "iw_df" => self.iw_df = num(key, v, line)?,
            "iw_scale" => self.iw_scale = num(key, v, line)?,
            "phi_max_fraction" => self.phi_max_fraction = num(key, v, line)?,
            "phi_max" => self.phi_max = opt_num(key, v, line)?,
            "grid_resolution" => self.grid_resolution = num(key, v, line)?,
            "cv_full_chains" => self.cv_full_chains = boolean(key, v, line)?,
            "cv_n_iter" => self.cv_n_iter = num(key, v, line)?,
            "cv_burn_in" => self.cv_burn_in = num(key, v, line)?,
            "cv_thin" => self.cv_thin = num(key, v, line)?,
            "variogram_bins" => self.variogram_bins = num(key, v, line)?,
            "variogram_max_distance" => self.variogram_max_distance = opt_num(key, v, line)?,
            "sim_grid_side" => self.sim_grid_side = num(key, v, line)?,
            "sim_n_test" => self.sim_n_test = num(key, v, line)?,
            "sim_replicates" => self.sim_replicates = num(key, v, line)?,
            "sim_levels" => self.sim_levels = list(key, v, line)?,
            "sim_settings" => {
                self.sim_settings = v
                    .split(',')
                    .map(|s| match s.trim() {
                        "S1" => Ok(Setting::S1),
                        "S2" => Ok(Setting::S2),
                        "S3" => Ok(Setting::S3),
                        _ => Err(parse_err(key, v, line)),
                    })
                    .collect::<Result<_>>()?
            }
            "sim_n_iter" => self.sim_n_iter = num(key, v, line)?,
            "sim_burn_in" => self.sim_burn_in = num(key, v, line)?,
            "sim_thin" => self.sim_thin = num(key, v, line)?,
            "sim_phi_fraction" => self.sim_phi_fraction = num(key, v, line)?,
            "sim_beta" => self.sim_beta = list(key, v, line)?,
            "sim_sigma" => self.sim_sigma = list(key, v, line)?,
            "sim_phi" => self.sim_phi = num(key, v, line)?,
            "sim_r" => self.sim_r = num(key, v, line)?,
            "workers" => self.workers = num(key, v, line)?,
            _ => return Err(Error::Parse(format!("line {line}: unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse(format!("line {}: expected `key = value`", i + 1)));
            };
            cfg.set(k.trim(), v.trim(), i + 1)?;
        }
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn distance_metric(&self) -> Result<DistanceMetric> {
        match self.metric.as_str() {
            "euclidean" => Ok(DistanceMetric::Euclidean),
            _ => DistanceMetric::geodesic(self.earth_radius_km),
        }
    }

    pub fn mcmc(&self) -> McmcConfig {
        McmcConfig {
            n_iter: self.n_iter,
            burn_in: self.burn_in,
            thin: self.thin,
            adapt_target: self.adapt_target,
            adapt_window: self.adapt_window,
            adapt_gain: self.adapt_gain,
            initial_step_sd: self.initial_step_sd,
            seed: self.seed,
            nu_includes_predictions: self.nu_includes_predictions,
            ..McmcConfig::default()
        }
    }

    pub fn cv_mcmc(&self) -> McmcConfig {
        if self.cv_full_chains {
            return self.mcmc();
        }
        McmcConfig {
            n_iter: self.cv_n_iter,
            burn_in: self.cv_burn_in,
            thin: self.cv_thin,
            ..self.mcmc()
        }
    }

    pub fn hyperpriors(&self, locs: &[Location], metric: DistanceMetric) -> Result<Hyperpriors> {
        let phi_max = match self.phi_max {
            Some(v) => v,
            None => self.phi_max_fraction * crate::geometry::max_pairwise_distance(locs, metric)?,
        };
        let h = Hyperpriors {
            beta_prior_sd: self.beta_prior_sd,
            iw_df: self.iw_df,
            iw_scale_mult: self.iw_scale,
            phi_max,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn design_for(&self, locs: &[Location]) -> Result<DesignConvention> {
        if self.standardize_covariates {
            DesignConvention::standardized_from(locs)
        } else {
            Ok(DesignConvention::Raw)
        }
    }

    pub fn scenario(&self) -> Result<SimScenario> {
        let p = (self.sim_sigma.len() as f64).sqrt().round() as usize;
        if p * p != self.sim_sigma.len() || p == 0 {
            return Err(Error::Parse("sim_sigma must hold P*P entries".into()));
        }
        if self.sim_beta.len() != 3 * p {
            return Err(Error::Parse(format!("sim_beta must hold 3*P = {} entries", 3 * p)));
        }
        let levels = self
            .sim_levels
            .iter()
            .enumerate()
            .map(|(i, &percentile)| CensorLevel {
                name: format!("L{}", i + 1),
                percentile,
            })
            .collect();
        let s = SimScenario {
            grid_side: self.sim_grid_side,
            n_test: self.sim_n_test,
            truth: ModelParams {
                beta: DMatrix::from_row_slice(3, p, &self.sim_beta),
                sigma: DMatrix::from_row_slice(p, p, &self.sim_sigma),
                phi: self.sim_phi,
                r: self.sim_r,
            },
            levels,
            settings: self.sim_settings.clone(),
            replicates: self.sim_replicates,
            phi_fraction: self.sim_phi_fraction,
            mcmc: McmcConfig {
                n_iter: self.sim_n_iter,
                burn_in: self.sim_burn_in,
                thin: self.sim_thin,
                ..self.mcmc()
            },
            seed: self.seed,
        };
        s.validate()?;
        Ok(s)
    }
}

// ---------------------------------------------------------------------------
// Station data

/// Options for reading a stations file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    pub metric: DistanceMetric,
    pub mdl: Option<f64>,
    pub standardize_covariates: bool,
}

impl IngestOptions {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            metric: cfg.distance_metric()?,
            mdl: cfg.mdl,
            standardize_covariates: cfg.standardize_covariates,
        })
    }
}

/// Reads a stations CSV. The header is `lon,lat` (or `x,y`), then for each
/// variable `<name>`, `<name>_censored` (0/1) and optionally `<name>_limit`.
/// Concentrations are on the natural scale and are log-transformed. Rows in
/// errors are 1-based data rows (the header is row 0).
pub fn read_stations(path: &Path, opts: &IngestOptions) -> Result<SpatialDataset> {
    parse_stations(File::open(path)?, opts)
}

pub fn parse_stations<R: Read>(reader: R, opts: &IngestOptions) -> Result<SpatialDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (cx, cy) = match (col("lon"), col("lat"), col("x"), col("y")) {
        (Some(a), Some(b), _, _) => (a, b),
        (_, _, Some(a), Some(b)) => (a, b),
        _ => return Err(Error::ingest(Some(0), "missing column `lon`/`lat` (or `x`/`y`)")),
    };
    let names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, h)| *i != cx && *i != cy && !h.ends_with("_censored") && !h.ends_with("_limit"))
        .map(|(_, h)| h.clone())
        .collect();
    if names.is_empty() {
        return Err(Error::ingest(Some(0), "no variable columns"));
    }
    let mut var_cols = Vec::with_capacity(names.len());
    for n in &names {
        let flag = col(&format!("{n}_censored"))
            .ok_or_else(|| Error::ingest(Some(0), format!("missing column `{n}_censored`")))?;
        var_cols.push((col(n).unwrap(), flag, col(&format!("{n}_limit"))));
    }
    let p = names.len();
    let mut locs = Vec::new();
    let (mut raw, mut cens, mut lims) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let number = |c: usize| -> Result<f64> {
            field(c)
                .parse::<f64>()
                .map_err(|_| Error::ingest(Some(row), format!("column `{}`: `{}` is not a number", header[c], field(c))))
        };
        let loc = Location::new(number(cx)?, number(cy)?);
        if let DistanceMetric::Geodesic { .. } = opts.metric {
            if !(-90.0..=90.0).contains(&loc.y) {
                return Err(Error::ingest(Some(row), format!("latitude {} out of range [-90, 90]", loc.y)));
            }
        }
        opts.metric.check(&loc).map_err(|e| Error::ingest(Some(row), e.to_string()))?;
        locs.push(loc);
        for (v, &(cv, cf, cl)) in var_cols.iter().enumerate() {
            let flag = match field(cf) {
                "1" | "true" | "TRUE" => true,
                "0" | "false" | "FALSE" => false,
                other => {
                    return Err(Error::ingest(
                        Some(row),
                        format!("column `{}_censored`: expected 0 or 1, got `{other}`", names[v]),
                    ))
                }
            };
            let limit = match cl {
                Some(c) if !field(c).is_empty() => number(c)?,
                _ => opts.mdl.unwrap_or(f64::NAN),
            };
            if flag && limit.is_nan() {
                return Err(Error::ingest(
                    Some(row),
                    format!("censored `{}` has no detection limit (add `{}_limit` or set mdl)", names[v], names[v]),
                ));
            }
            let value = if flag && field(cv).is_empty() { f64::NAN } else { number(cv)? };
            if !flag && !(value > 0.0) {
                return Err(Error::ingest(
                    Some(row),
                    format!("non-positive concentration {value} in `{}`", names[v]),
                ));
            }
            raw.push(value);
            cens.push(flag);
            lims.push(limit);
        }
    }
    let n = locs.len();
    if n == 0 {
        return Err(Error::ingest(None, "stations file has no data rows"));
    }
    let raw = DMatrix::from_row_slice(n, p, &raw);
    let cens = DMatrix::from_row_slice(n, p, &cens);
    let lims = DMatrix::from_row_slice(n, p, &lims);
    let (y, limits) = log_transform(&raw, &cens, &lims)?;
    let design = if opts.standardize_covariates {
        DesignConvention::standardized_from(&locs)?
    } else {
        DesignConvention::Raw
    };
    if n == 1 {
        log::warn!("a single station: the variogram is degenerate");
    }
    SpatialDataset::new(locs, y, cens, limits, names, design)
}

/// One-line description: sites, variables and censored counts.
pub fn dataset_summary(d: &SpatialDataset) -> String {
    let counts: Vec<String> = d
        .variable_names
        .iter()
        .enumerate()
        .map(|(v, n)| format!("{n}: {} censored", d.censored_count(v)))
        .collect();
    format!("N = {}, P = {}; {}", d.n_sites(), d.n_vars(), counts.join(", "))
}

// ---------------------------------------------------------------------------
// Polygons

/// Reads named polygons: a name line followed by `lon,lat` vertex lines, with
/// blocks separated by blank lines. `#` lines are ignored.
pub fn parse_regions(text: &str) -> Result<RegionPartition> {
    let mut regions = Vec::new();
    let mut name: Option<String> = None;
    let mut verts: Vec<Location> = Vec::new();
    let mut flush = |name: &mut Option<String>, verts: &mut Vec<Location>, line: usize| -> Result<()> {
        if let Some(n) = name.take() {
            let polygon = Polygon::new(std::mem::take(verts))
                .map_err(|e| Error::Parse(format!("region `{n}` ending at line {line}: {e}")))?;
            regions.push(Region { name: n, polygon });
        }
        Ok(())
    };
    let lines: Vec<&str> = text.lines().collect();
    for (i, raw) in lines.iter().enumerate() {
        let line = raw.trim();
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            flush(&mut name, &mut verts, i + 1)?;
            continue;
        }
        if name.is_none() {
            name = Some(line.to_string());
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        let coords: Option<Vec<f64>> = parts.iter().map(|s| s.parse().ok()).collect();
        match coords.as_deref() {
            Some(&[x, y]) => verts.push(Location::new(x, y)),
            _ => return Err(Error::Parse(format!("line {}: expected `lon,lat`, got `{line}`", i + 1))),
        }
    }
    flush(&mut name, &mut verts, lines.len())?;
    if regions.is_empty() {
        return Err(Error::Parse("polygon file contains no regions".into()));
    }
    Ok(RegionPartition::new(regions))
}

pub fn read_regions(path: &Path) -> Result<RegionPartition> {
    parse_regions(&std::fs::read_to_string(path)?)
}

/// Reads prediction sites from a CSV with `lon,lat` or `x,y` columns.
pub fn read_locations(path: &Path) -> Result<Vec<Location>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (cx, cy) = match (col("lon"), col("lat"), col("x"), col("y")) {
        (Some(a), Some(b), _, _) => (a, b),
        (_, _, Some(a), Some(b)) => (a, b),
        _ => return Err(Error::ingest(Some(0), "missing column `lon`/`lat` (or `x`/`y`)")),
    };
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get = |c: usize| -> Result<f64> {
            rec.get(c)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::ingest(Some(i + 1), format!("column `{}` is not a number", header[c])))
        };
        out.push(Location::new(get(cx)?, get(cy)?));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Draws sidecar

pub const DRAWS_MAGIC: &str = "mvspatial-draws";
pub const DRAWS_VERSION: u32 = 1;

/// Everything prediction needs from a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitRecord {
    pub locations: Vec<Location>,
    pub metric: DistanceMetric,
    pub design: DesignConvention,
    pub samples: PosteriorSamples,
}

/// Writes the sidecar. Text CSV records, floats in shortest round-trip form:
///
/// ```text
/// mvspatial-draws,1
/// dims,N,P,Q,S,C                 sites, variables, covariates, draws, censored cells
/// metric,euclidean | metric,geodesic,<radius_km>
/// design,raw | design,standardized,<x_mean>,<x_sd>,<y_mean>,<y_sd>
/// variables,<name>,…
/// site,<x>,<y>                   N lines
/// cell,<row>,<var>               C lines, 0-based
/// draw,<iteration>,<phi>,<r>,<acc_phi>,<acc_r>,<beta Q×P>,<Sigma P×P>,<imputed C>,<epsilon N×P>
/// ```
///
/// Matrices are row-major. The `epsilon` block is empty when the latent
/// field was not stored.
pub fn write_draws(path: &Path, fit: &FitRecord) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
    let s = &fit.samples;
    let (q, p) = s.draws.first().map_or((0, s.variable_names.len()), |d| d.beta.shape());
    w.write_record([DRAWS_MAGIC.to_string(), DRAWS_VERSION.to_string()])?;
    w.write_record(
        ["dims".to_string()]
            .into_iter()
            .chain([fit.locations.len(), p, q, s.draws.len(), s.censored_cells.len()].map(|v| v.to_string())),
    )?;
    match fit.metric {
        DistanceMetric::Euclidean => w.write_record(["metric", "euclidean"])?,
        DistanceMetric::Geodesic { earth_radius_km } => {
            w.write_record(["metric".to_string(), "geodesic".into(), earth_radius_km.to_string()])?
        }
    }
    match fit.design {
        DesignConvention::Raw => w.write_record(["design", "raw"])?,
        DesignConvention::Standardized {
            x_mean,
            x_sd,
            y_mean,
            y_sd,
        } => w.write_record(
            ["design".to_string(), "standardized".into()]
                .into_iter()
                .chain([x_mean, x_sd, y_mean, y_sd].map(|v| v.to_string())),
        )?,
    }
    w.write_record(std::iter::once("variables".to_string()).chain(s.variable_names.iter().cloned()))?;
    for l in &fit.locations {
        w.write_record(["site".to_string(), l.x.to_string(), l.y.to_string()])?;
    }
    for &(i, v) in &s.censored_cells {
        w.write_record(["cell".to_string(), i.to_string(), v.to_string()])?;
    }
    for d in &s.draws {
        let mut rec = vec![
            "draw".to_string(),
            d.iteration.to_string(),
            d.phi.to_string(),
            d.r.to_string(),
            (d.accepted_phi as u8).to_string(),
            (d.accepted_r as u8).to_string(),
        ];
        rec.extend(row_major(&d.beta).iter().map(f64::to_string));
        rec.extend(row_major(&d.sigma).iter().map(f64::to_string));
        rec.extend(d.imputed.iter().map(f64::to_string));
        if let Some(e) = &d.epsilon {
            rec.extend(row_major(e).iter().map(f64::to_string));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_draws(path: &Path) -> Result<FitRecord> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    let bad = |line: usize, msg: &str| Error::Parse(format!("draws file line {}: {msg}", line + 1));
    let f = |rec: &csv::StringRecord, k: usize, line: usize| -> Result<f64> {
        rec.get(k).and_then(|s| s.parse().ok()).ok_or_else(|| bad(line, "malformed number"))
    };
    let u = |rec: &csv::StringRecord, k: usize, line: usize| -> Result<usize> {
        rec.get(k).and_then(|s| s.parse().ok()).ok_or_else(|| bad(line, "malformed integer"))
    };
    let head = records.first().ok_or_else(|| bad(0, "empty file"))?;
    if head.get(0) != Some(DRAWS_MAGIC) {
        return Err(bad(0, "not a draws file"));
    }
    if head.get(1) != Some(&DRAWS_VERSION.to_string()[..]) {
        return Err(bad(0, &format!("unsupported version {:?}", head.get(1))));
    }
    let mut it = records.iter().enumerate().skip(1);
    let (ln, dims) = it.next().ok_or_else(|| bad(1, "missing dims"))?;
    if dims.get(0) != Some("dims") {
        return Err(bad(ln, "expected dims"));
    }
    let (n, p, q, s, c) = (u(dims, 1, ln)?, u(dims, 2, ln)?, u(dims, 3, ln)?, u(dims, 4, ln)?, u(dims, 5, ln)?);
    let (ln, m) = it.next().ok_or_else(|| bad(2, "missing metric"))?;
    let metric = match m.get(1) {
        Some("euclidean") => DistanceMetric::Euclidean,
        Some("geodesic") => DistanceMetric::geodesic(f(m, 2, ln)?)?,
        _ => return Err(bad(ln, "unknown metric")),
    };
    let (ln, d) = it.next().ok_or_else(|| bad(3, "missing design"))?;
    let design = match d.get(1) {
        Some("raw") => DesignConvention::Raw,
        Some("standardized") => DesignConvention::Standardized {
            x_mean: f(d, 2, ln)?,
            x_sd: f(d, 3, ln)?,
            y_mean: f(d, 4, ln)?,
            y_sd: f(d, 5, ln)?,
        },
        _ => return Err(bad(ln, "unknown design")),
    };
    let (ln, vars) = it.next().ok_or_else(|| bad(4, "missing variables"))?;
    let variable_names: Vec<String> = vars.iter().skip(1).map(str::to_string).collect();
    if vars.get(0) != Some("variables") || variable_names.len() != p {
        return Err(bad(ln, "variable names do not match dims"));
    }
    let mut locations = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, r) = it.next().ok_or_else(|| bad(records.len(), "truncated site block"))?;
        if r.get(0) != Some("site") {
            return Err(bad(ln, "expected site"));
        }
        locations.push(Location::new(f(r, 1, ln)?, f(r, 2, ln)?));
    }
    let mut censored_cells = Vec::with_capacity(c);
    for _ in 0..c {
        let (ln, r) = it.next().ok_or_else(|| bad(records.len(), "truncated cell block"))?;
        if r.get(0) != Some("cell") {
            return Err(bad(ln, "expected cell"));
        }
        censored_cells.push((u(r, 1, ln)?, u(r, 2, ln)?));
    }
    let base = 6 + q * p + p * p + c;
    let mut draws = Vec::with_capacity(s);
    for (ln, r) in it {
        if r.get(0) != Some("draw") {
            return Err(bad(ln, "expected draw"));
        }
        let with_eps = match r.len() {
            l if l == base => false,
            l if l == base + n * p => true,
            _ => return Err(bad(ln, "draw record has the wrong length")),
        };
        let vals = |from: usize, len: usize| -> Result<Vec<f64>> { (from..from + len).map(|k| f(r, k, ln)).collect() };
        let mut k = 6;
        let beta = DMatrix::from_row_slice(q, p, &vals(k, q * p)?);
        k += q * p;
        let sigma = DMatrix::from_row_slice(p, p, &vals(k, p * p)?);
        k += p * p;
        let imputed = vals(k, c)?;
        k += c;
        let epsilon = if with_eps {
            Some(DMatrix::from_row_slice(n, p, &vals(k, n * p)?))
        } else {
            None
        };
        draws.push(Draw {
            iteration: u(r, 1, ln)?,
            phi: f(r, 2, ln)?,
            r: f(r, 3, ln)?,
            accepted_phi: u(r, 4, ln)? == 1,
            accepted_r: u(r, 5, ln)? == 1,
            beta,
            sigma,
            imputed,
            epsilon,
        });
    }
    if draws.len() != s {
        return Err(Error::Parse(format!("draws file declares {s} draws but holds {}", draws.len())));
    }
    Ok(FitRecord {
        locations,
        metric,
        design,
        samples: PosteriorSamples {
            draws,
            censored_cells,
            variable_names,
        },
    })
}

// ---------------------------------------------------------------------------
// Reports

/// One row per stored draw: iteration, parameters, acceptance flags and the
/// imputed value of every censored cell (`<var>_row<k>`, 1-based rows).
pub fn write_trace(path: &Path, samples: &PosteriorSamples) -> Result<()> {
    let series = samples.parameter_series();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iteration".to_string()];
    header.extend(series.iter().map(|(n, _)| n.clone()));
    header.push("accept_phi".into());
    header.push("accept_r".into());
    header.extend(
        samples
            .censored_cells
            .iter()
            .map(|&(i, v)| format!("{}_row{}", samples.variable_names[v], i + 1)),
    );
    w.write_record(&header)?;
    for (k, d) in samples.draws.iter().enumerate() {
        let mut rec = vec![d.iteration.to_string()];
        rec.extend(series.iter().map(|(_, xs)| xs[k].to_string()));
        rec.push((d.accepted_phi as u8).to_string());
        rec.push((d.accepted_r as u8).to_string());
        rec.extend(d.imputed.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Posterior mean, sd and 2.5% / 97.5% quantiles per parameter, as a CSV and
/// an aligned text table followed by the acceptance rates.
pub fn write_summary(dir: &Path, samples: &PosteriorSamples, diag: &ChainDiagnostics) -> Result<()> {
    let summary = samples.summary();
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["parameter", "mean", "sd", "q2.5", "q97.5"])?;
    for s in &summary {
        w.write_record([s.name.clone(), fmt3(s.mean), fmt3(s.sd), fmt3(s.q025), fmt3(s.q975)])?;
    }
    w.flush()?;
    let mut t = String::new();
    let _ = writeln!(t, "{:<14}{:>10}{:>10}{:>10}{:>10}", "parameter", "mean", "sd", "2.5%", "97.5%");
    for s in &summary {
        let _ = writeln!(
            t,
            "{:<14}{:>10}{:>10}{:>10}{:>10}",
            s.name,
            fmt3(s.mean),
            fmt3(s.sd),
            fmt3(s.q025),
            fmt3(s.q975)
        );
    }
    let _ = writeln!(t);
    let _ = writeln!(t, "stored draws: {}", samples.draws.len());
    let _ = writeln!(t, "acceptance rate phi: {:.3}", diag.accept_rate_phi);
    let _ = writeln!(t, "acceptance rate r: {:.3}", diag.accept_rate_r);
    let _ = writeln!(t, "final step sd phi: {:.4}, r: {:.4}", diag.step_sd_phi, diag.step_sd_r);
    std::fs::write(dir.join("summary.txt"), t)?;
    Ok(())
}

fn fmt3(x: f64) -> String {
    format!("{x:.3}")
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

/// One row per grid cell and variable.
pub fn write_predictions(
    path: &Path,
    grid: &PredictionGrid,
    summary: &PredictiveSummary,
    names: &[String],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "lon",
        "lat",
        "region",
        "variable",
        "mean_log",
        "sd_log",
        "q2.5_log",
        "q50_log",
        "q97.5_log",
        "mean_natural",
    ])?;
    let level = |p: f64| {
        crate::predict::SUMMARY_LEVELS
            .iter()
            .position(|&l| l == p)
            .expect("summary level")
    };
    let (lo, mid, hi) = (level(0.025), level(0.5), level(0.975));
    for i in 0..grid.len() {
        let loc = grid.locations[i];
        for (v, name) in names.iter().enumerate() {
            w.write_record([
                fmt6(loc.x),
                fmt6(loc.y),
                grid.region_of(i).unwrap_or("").to_string(),
                name.clone(),
                fmt6(summary.mean[(i, v)]),
                fmt6(summary.sd[(i, v)]),
                fmt6(summary.quantiles[lo][(i, v)]),
                fmt6(summary.quantiles[mid][(i, v)]),
                fmt6(summary.quantiles[hi][(i, v)]),
                fmt6(summary.mean_natural[(i, v)]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Region table: one row per region, a mean/SE column pair per variable.
pub fn write_region_table(path: &Path, means: &[RegionMean], names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["region".to_string(), "n_cells".to_string()];
    for n in names {
        header.push(format!("{n}_mean"));
        header.push(format!("{n}_se"));
    }
    w.write_record(&header)?;
    let mut regions: Vec<&str> = Vec::new();
    for m in means {
        if !regions.contains(&m.region.as_str()) {
            regions.push(&m.region);
        }
    }
    for r in regions {
        let rows: Vec<&RegionMean> = means.iter().filter(|m| m.region == r).collect();
        let mut rec = vec![r.to_string(), rows[0].n_cells.to_string()];
        for v in 0..names.len() {
            match rows.iter().find(|m| m.variable == v) {
                Some(m) => {
                    rec.push(fmt3(m.mean));
                    rec.push(fmt3(m.se));
                }
                None => rec.extend(["NA".to_string(), "NA".to_string()]),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_variogram(path: &Path, bins: &[VariogramBin]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_center", "gamma", "n_pairs"])?;
    for b in bins {
        w.write_record([
            fmt6(b.center),
            b.gamma.map_or("NA".into(), fmt6),
            b.n_pairs.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_correlations(path: &Path, corr: &DMatrix<Option<f64>>, names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(std::iter::once("variable".to_string()).chain(names.iter().cloned()))?;
    for (i, n) in names.iter().enumerate() {
        let mut rec = vec![n.clone()];
        rec.extend((0..names.len()).map(|j| corr[(i, j)].map_or("NA".into(), fmt6)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// OLS residuals per complete-case site, one column per variable.
pub fn write_residuals(path: &Path, ols: &OlsResult, data: &SpatialDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["row".to_string(), "lon".to_string(), "lat".to_string()];
    header.extend(data.variable_names.iter().cloned());
    w.write_record(&header)?;
    for (k, &i) in ols.sites.iter().enumerate() {
        let loc = data.locations[i];
        let mut rec = vec![(i + 1).to_string(), fmt6(loc.x), fmt6(loc.y)];
        rec.extend((0..data.n_vars()).map(|v| fmt6(ols.residuals[(k, v)])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `text` to `path` through a buffered writer.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// First line of a file, for format sniffing.
pub fn first_line(path: &Path) -> Result<String> {
    let mut s = String::new();
    BufReader::new(File::open(path)?).read_line(&mut s)?;
    Ok(s.trim_end().to_string())
}
