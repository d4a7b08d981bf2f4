mod common;

use common::*;
use mvspatial::geometry::{DistanceMetric, Location};
use mvspatial::io::{read_draws, write_draws, FitRecord, RunConfig};
use mvspatial::mcmc::{Draw, PosteriorSamples};
use mvspatial::metrics::quantile;
use mvspatial::model::DesignConvention;
use mvspatial_cli::{cmd_predict, crossvalidate, DRAWS_FILE};
use nalgebra::DMatrix;

fn setup(n: usize, censor: Option<f64>) -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let locs = sites(n, 3);
    let y = field(&locs, &truth(2), 4);
    let st = write(dir.path(), "stations.csv", &stations_csv(&locs, &y, censor));
    let cfg = write(dir.path(), "run.cfg", TINY);
    (dir, st, cfg)
}

#[test]
fn print_config_round_trips() {
    let out = run(&["--print-config"]);
    assert_ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
    assert!(text.contains("n_iter = 70000"));

    let out = run(&["--print-config", "--seed", "9", "--metric", "euclidean", "--nu-includes-predictions"]);
    let c = RunConfig::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!((c.seed, c.metric.as_str(), c.nu_includes_predictions), (9, "euclidean", true));
}

#[test]
fn fit_writes_reports_and_respects_limits() {
    let (dir, st, cfg) = setup(20, Some(0.25));
    let out_dir = dir.path().join("fit");
    let out = run(&[
        "fit",
        "--stations",
        st.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("N = 20, P = 2; V1: 5 censored, V2: 0 censored"), "{stdout}");
    for f in ["trace.csv", "summary.csv", "summary.txt", DRAWS_FILE] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), "parameter,mean,sd,q2.5,q97.5");
    assert_eq!(summary.lines().count(), 1 + 6 + 3 + 2);

    let fit = read_draws(&out_dir.join(DRAWS_FILE)).unwrap();
    assert_eq!(fit.samples.draws.len(), 60);
    let data = mvspatial_cli::load_dataset(&st, &RunConfig::parse(TINY).unwrap()).unwrap();
    for d in &fit.samples.draws {
        for (k, &(i, v)) in fit.samples.censored_cells.iter().enumerate() {
            assert!(d.imputed[k] < data.limits[(i, v)]);
        }
    }
}

#[test]
fn errors_are_one_line_with_category() {
    let dir = tempfile::tempdir().unwrap();
    let st = write(dir.path(), "dup.csv", "x,y,A,A_censored\n0,0,1,0\n1,1,2,0\n0,0,3,0\n");
    let out = run(&["fit", "--stations", st.to_str().unwrap(), "--metric", "euclidean", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("error[ingest]:"), "{err}");
    assert!(line.contains("row 3") && line.contains("duplicate"), "{line}");

    let cfg = write(dir.path(), "bad.cfg", "thin = 0\n");
    let st = write(dir.path(), "ok.csv", "x,y,A,A_censored\n0,0,1,0\n1,1,2,0\n");
    let out = run(&["fit", "--stations", st.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--metric", "euclidean"]);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.trim_end().ends_with("thin must be at least 1"), "{err}");
    assert!(err.lines().last().unwrap().starts_with("error[domain]:"));

    let out = run(&["--config", "/nonexistent/run.cfg", "--print-config"]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[io]:"));
}

fn pipeline(dir: &std::path::Path, st: &std::path::Path, cfg: &std::path::Path, regions: &std::path::Path, tag: &str) -> Vec<(String, Vec<u8>)> {
    let base = dir.join(tag);
    let fit = base.join("fit");
    let pred = base.join("pred");
    let eda = base.join("eda");
    let cv = base.join("cv");
    let args = |cmd: &str, out: &std::path::Path| {
        vec![
            cmd.to_string(),
            "--stations".into(),
            st.to_str().unwrap().into(),
            "--config".into(),
            cfg.to_str().unwrap().into(),
            "--out-dir".into(),
            out.to_str().unwrap().into(),
        ]
    };
    for (cmd, out) in [("fit", &fit), ("eda", &eda), ("cv", &cv)] {
        assert_ok(&bin().args(args(cmd, out)).output().unwrap());
    }
    let mut a = args("predict", &pred);
    a.extend(["--fit-dir".into(), fit.to_str().unwrap().into(), "--regions".into(), regions.to_str().unwrap().into()]);
    assert_ok(&bin().args(a).output().unwrap());
    let mut all = Vec::new();
    for d in [&fit, &pred, &eda, &cv] {
        for (name, bytes) in snapshot(d) {
            all.push((format!("{}/{name}", d.file_name().unwrap().to_string_lossy()), bytes));
        }
    }
    all
}

fn strips(k: usize, width: f64, height: f64) -> String {
    let mut s = String::new();
    for i in 0..k {
        let (x0, x1) = (i as f64 * width, (i + 1) as f64 * width);
        s += &format!("strip{}\n{x0},0\n{x1},0\n{x1},{height}\n{x0},{height}\n\n", i + 1);
    }
    s
}

#[test]
fn subcommands_are_byte_identical_on_rerun() {
    let (dir, st, _) = setup(14, Some(0.2));
    let cfg = write(dir.path(), "fine.cfg", &format!("{TINY}grid_resolution = 0.5\n"));
    let regions = write(dir.path(), "regions.txt", &strips(7, 10.0 / 7.0, 10.0));
    let a = pipeline(dir.path(), &st, &cfg, &regions, "a");
    let b = pipeline(dir.path(), &st, &cfg, &regions, "b");
    assert!(a.len() >= 12);
    assert_eq!(a.len(), b.len());
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }
    let regions_csv = a.iter().find(|(n, _)| n == "pred/regions.csv").unwrap();
    assert_eq!(String::from_utf8_lossy(&regions_csv.1).lines().count(), 1 + 7);
    let vario = a.iter().find(|(n, _)| n == "eda/variogram_V1.csv").unwrap();
    assert_eq!(String::from_utf8_lossy(&vario.1).lines().count(), 1 + 15);
    let resid = a.iter().find(|(n, _)| n == "eda/residuals.csv").unwrap();
    let header = String::from_utf8_lossy(&resid.1).lines().next().unwrap().to_string();
    assert_eq!(header, "row,lon,lat,V1,V2");
}

#[test]
fn different_seed_changes_output() {
    let (dir, st, cfg) = setup(10, None);
    let fit = |seed: &str, out: &str| {
        let o = dir.path().join(out);
        assert_ok(&run(&["fit", "--stations", st.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--seed", seed, "--out-dir", o.to_str().unwrap()]));
        std::fs::read(o.join("trace.csv")).unwrap()
    };
    assert_ne!(fit("1", "s1"), fit("2", "s2"));
}

/// A stored fit whose every draw carries the same parameters and latent field.
fn fixed_fit(locs: Vec<Location>, y: &DMatrix<f64>, r: f64, phi: f64, draws: usize) -> FitRecord {
    let p = y.ncols();
    let beta = DMatrix::from_fn(3, p, |i, v| if i == 0 { 1.0 + v as f64 } else { 0.0 });
    let x = DesignConvention::Raw.design_matrix(&locs);
    let eps = y - &x * &beta;
    let draw = |k: usize| Draw {
        iteration: k,
        beta: beta.clone(),
        sigma: DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { 0.3 }),
        phi,
        r,
        imputed: Vec::new(),
        epsilon: Some(eps.clone()),
        accepted_phi: false,
        accepted_r: false,
    };
    FitRecord {
        locations: locs,
        metric: DistanceMetric::Euclidean,
        design: DesignConvention::Raw,
        samples: PosteriorSamples {
            draws: (0..draws).map(draw).collect(),
            censored_cells: Vec::new(),
            variable_names: (1..=p).map(|v| format!("V{v}")).collect(),
        },
    }
}

#[test]
fn prediction_at_data_sites_interpolates_when_r_near_one() {
    let dir = tempfile::tempdir().unwrap();
    let locs = sites(12, 8);
    let y = field(&locs, &truth(2), 9);
    write_draws(&dir.path().join(DRAWS_FILE), &fixed_fit(locs.clone(), &y, 1.0 - 1e-9, 2.0, 50)).unwrap();
    let cfg = RunConfig::parse(TINY).unwrap();
    let res = cmd_predict(dir.path(), &cfg, locs, None, &dir.path().join("pred")).unwrap();
    for i in 0..12 {
        for v in 0..2 {
            assert!((res.summary.mean[(i, v)] - y[(i, v)]).abs() < 1e-3);
        }
    }
}

#[test]
fn predictive_sd_grows_away_from_stations() {
    let dir = tempfile::tempdir().unwrap();
    // stations confined to the left half of a 20 x 10 domain
    let locs: Vec<Location> = sites(15, 21).into_iter().map(|l| Location::new(l.x * 0.5, l.y)).collect();
    let y = field(&locs, &truth(2), 22);
    write_draws(&dir.path().join(DRAWS_FILE), &fixed_fit(locs.clone(), &y, 0.9, 3.0, 400)).unwrap();
    let near: Vec<Location> = locs.iter().map(|l| Location::new(l.x + 0.05, l.y)).collect();
    let far: Vec<Location> = (0..15).map(|k| Location::new(16.0 + (k % 3) as f64, 1.0 + (k / 3) as f64 * 2.0)).collect();
    let cfg = RunConfig::parse(TINY).unwrap();
    let mut grid = near.clone();
    grid.extend(far);
    let res = cmd_predict(dir.path(), &cfg, grid, None, &dir.path().join("pred")).unwrap();
    let sd: Vec<f64> = (0..30).map(|i| res.summary.sd[(i, 0)]).collect();
    let med_near = quantile(&sd[..15], 0.5);
    let med_far = quantile(&sd[15..], 0.5);
    assert!(med_far > med_near, "{med_far} vs {med_near}");
    assert!(sd.iter().all(|&s| s > 0.0));
}

#[test]
fn predict_without_grid_source_fails() {
    let out = run(&["predict", "--out-dir", "/tmp/none"]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[domain]: domain error: no prediction grid"));
}

#[test]
fn cross_validation_intervals_are_calibrated_on_model_data() {
    // LOSO 95% intervals on data drawn from the model; values pooled over
    // three datasets
    let mut cfg = RunConfig::parse(TINY).unwrap();
    cfg.cv_n_iter = 1500;
    cfg.cv_burn_in = 500;
    let (mut hits, mut total) = (0usize, 0usize);
    for rep in 0..3 {
        let locs = sites(30, 100 + rep);
        let y = field(&locs, &truth(2), 200 + rep);
        let dir = tempfile::tempdir().unwrap();
        let st = write(dir.path(), "s.csv", &stations_csv(&locs, &y, None));
        let data = mvspatial_cli::load_dataset(&st, &cfg).unwrap();
        let rows = crossvalidate(&data, &cfg).unwrap();
        assert_eq!(rows.len(), 30 * 2);
        hits += rows.iter().filter(|r| r.covered()).count();
        total += rows.len();
    }
    let cov = hits as f64 / total as f64;
    let se = (0.95 * 0.05 / total as f64).sqrt();
    assert!((cov - 0.95).abs() < 4.0 * se, "coverage {cov}");
}

#[test]
fn fit_then_predict_equals_in_memory_run() {
    use mvspatial::linalg::derive_seed;
    use mvspatial::predict::{predictive_draws, summarize_predictive, PredictionContext, PredictionGrid};
    let (dir, st, _) = setup(12, Some(0.2));
    let cfg = RunConfig::parse(TINY).unwrap();
    let fit_dir = dir.path().join("fit");
    let fit = mvspatial_cli::cmd_fit(&st, &cfg, None, &fit_dir).unwrap();
    let grid_locs: Vec<Location> = (0..6).map(|k| Location::new(1.5 * k as f64, 5.0)).collect();
    let stored = cmd_predict(&fit_dir, &cfg, grid_locs.clone(), None, &dir.path().join("pred")).unwrap();

    let grid = PredictionGrid::new(grid_locs, &fit.data.design, None).unwrap();
    let pctx = PredictionContext::new(&fit.data.locations, &grid, DistanceMetric::Euclidean).unwrap();
    let draws = predictive_draws(&fit.output.samples, &pctx, derive_seed(cfg.seed, mvspatial_cli::PREDICT_STREAM)).unwrap();
    assert_eq!(summarize_predictive(&draws).unwrap(), stored.summary);
}
