#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvspatial::geometry::{distance_matrix, DistanceMetric, Location};
use mvspatial::linalg::{sample_matrix_normal, RngStream};
use mvspatial::metrics::quantile;
use mvspatial::model::{corr_from_distances, DesignConvention, ModelParams};
use nalgebra::DMatrix;

pub fn truth(p: usize) -> ModelParams {
    let mut beta = DMatrix::zeros(3, p);
    for v in 0..p {
        beta[(0, v)] = 1.0 + v as f64;
        beta[(1, v)] = 0.3;
    }
    let sigma = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { 0.5 });
    ModelParams {
        beta,
        sigma,
        phi: 2.0,
        r: 0.8,
    }
}

/// Scattered sites on a planar `[0, 10]²` square.
pub fn sites(n: usize, seed: u64) -> Vec<Location> {
    let mut rng = RngStream::new(seed);
    let u = mvspatial::linalg::standard_normal_matrix(n, 2, &mut rng);
    (0..n)
        .map(|i| {
            let f = |z: f64| 10.0 * mvspatial::linalg::norm_cdf(z);
            Location::new(f(u[(i, 0)]), f(u[(i, 1)]))
        })
        .collect()
}

/// Log-scale field drawn from the model at `locs`, with a raw design.
pub fn field(locs: &[Location], params: &ModelParams, seed: u64) -> DMatrix<f64> {
    let n = locs.len();
    let x = DesignConvention::Raw.design_matrix(locs);
    let corr = corr_from_distances(&distance_matrix(locs, DistanceMetric::Euclidean).unwrap(), params.phi);
    let row = corr * params.r + DMatrix::identity(n, n) * (1.0 - params.r);
    sample_matrix_normal(&(&x * &params.beta), &row, &params.sigma, &mut RngStream::new(seed)).unwrap()
}

/// Stations CSV (natural scale). Variable 1 is censored below its
/// `censor_p` quantile with a per-row limit column.
pub fn stations_csv(locs: &[Location], y: &DMatrix<f64>, censor_p: Option<f64>) -> String {
    let p = y.ncols();
    let mdl = censor_p.map(|q| quantile(&y.column(0).iter().copied().collect::<Vec<_>>(), q));
    let mut s = String::from("x,y");
    for v in 0..p {
        s += &format!(",V{0},V{0}_censored", v + 1);
        if v == 0 {
            s += ",V1_limit";
        }
    }
    s.push('\n');
    for (i, l) in locs.iter().enumerate() {
        s += &format!("{},{}", l.x, l.y);
        for v in 0..p {
            let val = y[(i, v)];
            let cens = v == 0 && mdl.is_some_and(|m| val < m);
            if cens {
                s += ",,1";
            } else {
                s += &format!(",{},0", val.exp());
            }
            if v == 0 {
                match mdl {
                    Some(m) => s += &format!(",{}", m.exp()),
                    None => s += ",",
                }
            }
        }
        s.push('\n');
    }
    s
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mvspatial"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

pub fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Short chains and a planar metric.
pub const TINY: &str = "metric = euclidean\nn_iter = 400\nburn_in = 100\nthin = 5\n\
cv_n_iter = 400\ncv_burn_in = 100\ncv_thin = 5\ngrid_resolution = 2\n";

/// Every regular file under `dir` with its bytes, sorted by name.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}
