//! Command-line experiment runner.
//!
//! `solve` and `inverse` train the configured problem across seeds and write
//! `report.json`, `results.csv`, and per-seed `trace_<seed>.csv` files into
//! the output directory. `bench-kinv` times kernel-inverse construction plus
//! one quadratic form for the packet and dense paths. `validate` checks a
//! config without running anything.
//!
//! Exit codes: 0 success, 1 config error, 2 training divergence, 3 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rkhs_pinn::config::ExperimentConfig;
use rkhs_pinn::kernel::MaternParams;
use rkhs_pinn::losses::DEFAULT_DENSE_CAP;
use rkhs_pinn::report::{
    emit_timing, mean_and_se, run_experiment, time_kinverse, KinvMethod, RunOptions, RunReport,
};
use rkhs_pinn::residuals::Mode;
use rkhs_pinn::Error;

#[derive(Parser)]
#[command(name = "rkhs-pinn", version, about = "Kernel-norm physics-informed network benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Directory for report.json, results.csv and trace files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Comma-separated seed list overriding the config (e.g. `0,1,2`).
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Validate the config, build all factors, train two iterations per run,
    /// write nothing.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train with equation coefficients fixed at their true values.
    Solve { config: PathBuf },
    /// Estimate the equation coefficient jointly with the network.
    Inverse { config: PathBuf },
    /// Time kernel-inverse construction + one quadratic form.
    BenchKinv {
        /// Points of a 1-D grid.
        #[arg(long, conflicts_with = "grid")]
        n: Option<usize>,
        /// Tensor grid shape, e.g. `200,300`.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<usize>>,
        /// Matern smoothness (0.5, 1.5 or 2.5).
        #[arg(long, default_value_t = 0.5)]
        nu: f64,
        /// Kernel length scale.
        #[arg(long, default_value_t = 1.0)]
        ell: f64,
        /// `kp` (sparse packets) or `dense` (Cholesky).
        #[arg(long, default_value = "kp")]
        method: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Check a config file and exit.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are not errors; everything else is a
            // malformed invocation, i.e. a config error.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                Error::Io { .. } | Error::Dataset { .. } => 3,
                Error::TrainingDiverged { .. } => 2,
                _ => 1,
            })
        }
    }
}

fn run(cli: Cli) -> rkhs_pinn::Result<ExitCode> {
    match &cli.command {
        Command::Solve { config } => train_command(config, Mode::Forward, &cli),
        Command::Inverse { config } => train_command(config, Mode::Inverse, &cli),
        Command::Validate { config } => {
            ExperimentConfig::from_path(config)?;
            println!("ok: {}", config.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::BenchKinv {
            n,
            grid,
            nu,
            ell,
            method,
            repeats,
        } => {
            let shape = match (n, grid) {
                (Some(n), None) => vec![*n],
                (None, Some(grid)) => grid.clone(),
                _ => {
                    return Err(Error::Config {
                        path: "n/grid".into(),
                        reason: "exactly one of --n and --grid is required".into(),
                    })
                }
            };
            let params = MaternParams::new(*nu, *ell)?;
            let method = KinvMethod::parse(method)?;
            let timing = time_kinverse(&shape, params, method, *repeats, DEFAULT_DENSE_CAP)?;
            if !cli.dry_run {
                emit_timing(&timing, &cli.out)?;
            }
            println!(
                "{} shape={:?} nu={} ell={} repeats={}: median {:.6} s, min {:.6} s, y'K^-1 y = {:.6e}",
                timing.method,
                timing.shape,
                timing.nu,
                timing.ell,
                timing.repeats,
                timing.median_s,
                timing.min_s,
                timing.quadratic_form
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn train_command(config: &Path, mode: Mode, cli: &Cli) -> rkhs_pinn::Result<ExitCode> {
    let cfg = ExperimentConfig::from_path(config)?;
    let opts = RunOptions {
        out_dir: Some(cli.out.clone()),
        seeds: cli.seeds.clone(),
        dry_run: cli.dry_run,
    };
    let reports = run_experiment(&cfg, mode, &opts)?;
    for report in &reports {
        println!("{}", summarize(report));
    }
    if cli.dry_run {
        println!("dry run ok: {}", config.display());
        return Ok(ExitCode::SUCCESS);
    }
    println!("artifacts written to {}", cli.out.display());
    let diverged = reports
        .iter()
        .flat_map(|r| &r.results)
        .any(|r| r.status == "diverged");
    Ok(if diverged {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn summarize(report: &RunReport) -> String {
    let mut parts = vec![format!(
        "{} {} {}",
        report.problem, report.loss, report.mode
    )];
    if let Some(mean) = report.mean_rel_l2 {
        parts.push(match report.se_rel_l2 {
            Some(se) => format!("rel_l2 {mean:.4e} (se {se:.1e})"),
            None => format!("rel_l2 {mean:.4e}"),
        });
    }
    let thetas: Vec<f64> = report.results.iter().filter_map(|r| r.theta_hat).collect();
    if !thetas.is_empty() {
        let (mean, _) = mean_and_se(&thetas);
        parts.push(format!("theta_hat {mean:.5}"));
    }
    let statuses: Vec<&str> = report.results.iter().map(|r| r.status.as_str()).collect();
    parts.push(format!("[{}]", statuses.join(",")));
    parts.join("  ")
}
