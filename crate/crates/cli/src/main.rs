use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mvspatial::io::RunConfig;
use mvspatial::{Error, Result};
use mvspatial_cli::*;

#[derive(Parser, Debug)]
#[command(name = "mvspatial", version, about = "Multivariate spatial model for left-censored data")]
struct Cli {
    /// Key-value configuration file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for cross-validation folds, replicates and prediction.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, value_enum, global = true)]
    metric: Option<Metric>,
    /// Count prediction sites in the inverse-Wishart degrees of freedom.
    #[arg(long, global = true)]
    nu_includes_predictions: bool,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[arg(long, global = true)]
    stations: Option<PathBuf>,
    /// Polygon file outlining the prediction domain.
    #[arg(long, global = true)]
    boundary: Option<PathBuf>,
    /// Polygon file of named regions for region means.
    #[arg(long, global = true)]
    regions: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Metric {
    Geodesic,
    Euclidean,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the sampler; write traces, the posterior summary and the draws sidecar.
    Fit,
    /// Posterior predictive surface and region means from a stored fit.
    Predict {
        /// Directory holding the draws sidecar (defaults to --out-dir).
        #[arg(long)]
        fit_dir: Option<PathBuf>,
        /// CSV of prediction sites (`lon,lat`); overrides --boundary.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Leave-one-site-out cross-validation over fully observed sites.
    Cv,
    /// Synthetic censoring study; writes the score tables.
    Simulate,
    /// OLS residuals, their correlations and semivariograms.
    Eda,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(m) = cli.metric {
        cfg.metric = match m {
            Metric::Geodesic => "geodesic".into(),
            Metric::Euclidean => "euclidean".into(),
        };
    }
    if cli.nu_includes_predictions {
        cfg.nu_includes_predictions = true;
    }
    Ok(cfg)
}

fn stations(cli: &Cli) -> Result<&PathBuf> {
    cli.stations
        .as_ref()
        .ok_or_else(|| Error::domain("this subcommand needs --stations"))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_config_string());
        return Ok(());
    }
    if cfg.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let Some(command) = &cli.command else {
        return Err(Error::domain("no subcommand given (fit, predict, cv, simulate, eda)"));
    };
    let out = &cli.out_dir;
    match command {
        Command::Fit => {
            let m = if cfg.nu_includes_predictions {
                let boundary = load_regions(cli.boundary.as_deref())?;
                let regions = load_regions(cli.regions.as_deref())?;
                Some(build_grid(&cfg, None, boundary.as_ref(), regions.as_ref())?.len())
            } else {
                None
            };
            let fit = cmd_fit(stations(&cli)?, &cfg, m, out)?;
            println!("{}", mvspatial::io::dataset_summary(&fit.data));
            let d = &fit.output.diagnostics;
            println!(
                "stored {} draws; acceptance phi {:.3}, r {:.3}",
                fit.output.samples.draws.len(),
                d.accept_rate_phi,
                d.accept_rate_r
            );
        }
        Command::Predict { fit_dir, grid } => {
            let boundary = load_regions(cli.boundary.as_deref())?;
            let regions = load_regions(cli.regions.as_deref())?;
            let locs = build_grid(&cfg, grid.as_deref(), boundary.as_ref(), regions.as_ref())?;
            let res = cmd_predict(fit_dir.as_ref().unwrap_or(out), &cfg, locs, regions.as_ref(), out)?;
            println!("predicted {} cells; {} region rows", res.grid.len(), res.regions.len());
        }
        Command::Cv => {
            let rows = cmd_cv(stations(&cli)?, &cfg, out)?;
            let covered = rows.iter().filter(|r| r.covered()).count();
            println!("{} held-out values; 95% coverage {:.3}", rows.len(), covered as f64 / rows.len() as f64);
        }
        Command::Simulate => {
            let res = cmd_simulate(&cfg, out)?;
            let failed: usize = res.arms.iter().map(|a| a.failures).sum();
            println!("{} arms written; {failed} failed replicates", res.arms.len());
        }
        Command::Eda => {
            let e = cmd_eda(stations(&cli)?, &cfg, out)?;
            println!("{} variograms written", e.variograms.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(1)
        }
    }
}
