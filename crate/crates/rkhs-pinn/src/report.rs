//! Result artifacts: the relative L2 metric, run reports and their files
//! (`report.json`, `results.csv`, `trace_<seed>.csv`), and the wall-clock
//! harness comparing packet and dense kernel-inverse paths.
//!
//! File writes are idempotent upserts keyed by
//! `(problem, loss, nu_or_order, mode[, seed])`: existing rows for the same
//! key are replaced, others preserved, and every write goes through a
//! temp-file rename so partially written artifacts never appear.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::kernel::{Grid1D, MaternParams, TensorGrid};
use crate::losses::PreparedLoss;
use crate::network::MlpConfig;
use crate::packet::{DenseKernelFactor, InverseOperator};
use crate::residuals::{point_observables, FieldSource, FrozenNetworkSource, Mode, ProblemSpec};
use crate::tensor::build_tensor_factor;
use crate::training::{train, TracePoint};
use crate::{Error, Result};

/// `sqrt( sum |pred - truth|^2 / sum |truth|^2 )`.
pub fn relative_l2_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::DimensionMismatch {
            context: "relative L2 error",
            expected: truth.len(),
            got: pred.len(),
        });
    }
    let num: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    let den: f64 = truth.iter().map(|t| t * t).sum();
    if den == 0.0 {
        return Err(Error::ZeroReferenceNorm);
    }
    Ok((num / den).sqrt())
}

/// Mean and standard error (sample stddev over sqrt of count) of a sample.
/// The standard error is `None` for fewer than two values.
pub fn mean_and_se(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt() / n.sqrt()))
}

/// Network predictions of all observables pooled over the test grid,
/// scored against the problem's reference solution.
pub fn test_error(spec: &ProblemSpec, net: &MlpConfig, params: &[f64]) -> Result<f64> {
    let mut source = FrozenNetworkSource {
        net,
        params: &params[..net.param_count()],
        offset: 0,
        layout: spec.layout(),
    };
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for point in spec.test_grid().points() {
        let fields = source.fields(&point)?;
        let exact = spec.exact_observables(&point)?;
        pred.extend(point_observables(spec, &fields));
        truth.extend(exact);
    }
    relative_l2_error(&pred, &truth)
}

// ---------------------------------------------------------------------------
// Run reports.
// ---------------------------------------------------------------------------

/// Outcome of one seed of one experiment row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Relative L2 error on the test grid; absent for failed runs or
    /// problems without a reference solution.
    pub rel_l2: Option<f64>,
    /// Final coefficient estimate (inverse mode).
    pub theta_hat: Option<f64>,
    /// Optimizer steps performed.
    pub iters: usize,
    pub wall_s: f64,
    /// `completed`, `converged`, `stalled`, `diverged`, `budget-exhausted`
    /// or `skipped`.
    pub status: String,
}

/// One experiment row — a (problem, loss, mode) cell aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub artifact_version: String,
    pub problem: String,
    pub loss: String,
    pub nu_or_order: String,
    pub mode: String,
    pub seeds: Vec<u64>,
    pub results: Vec<SeedResult>,
    pub mean_rel_l2: Option<f64>,
    pub se_rel_l2: Option<f64>,
    /// The configuration this run was produced from, verbatim.
    pub config: String,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn new(problem: &str, loss: &str, nu_or_order: &str, mode: &str) -> Self {
        Self {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            problem: problem.into(),
            loss: loss.into(),
            nu_or_order: nu_or_order.into(),
            mode: mode.into(),
            seeds: Vec::new(),
            results: Vec::new(),
            mean_rel_l2: None,
            se_rel_l2: None,
            config: String::new(),
            notes: Vec::new(),
        }
    }

    fn key(&self) -> (&str, &str, &str, &str) {
        (&self.problem, &self.loss, &self.nu_or_order, &self.mode)
    }

    /// Recomputes the cross-seed mean and standard error from `results`.
    pub fn finalize_stats(&mut self) {
        let errors: Vec<f64> = self.results.iter().filter_map(|r| r.rel_l2).collect();
        if errors.is_empty() {
            self.mean_rel_l2 = None;
            self.se_rel_l2 = None;
        } else {
            let (mean, se) = mean_and_se(&errors);
            self.mean_rel_l2 = Some(mean);
            self.se_rel_l2 = se;
        }
    }

    /// Directory-name-safe tag for this row's trace files.
    pub fn run_tag(&self) -> String {
        format!("{}_{}_{}", self.problem, self.loss.replace(':', "-"), self.mode)
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))?;
    Ok(())
}

/// Loads the accumulated report array (missing file → empty).
pub fn load_reports(out_dir: &Path) -> Result<Vec<RunReport>> {
    let path = out_dir.join("report.json");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::Config {
        path: path.display().to_string(),
        reason: format!("unreadable report file: {e}"),
    })
}

const RESULTS_HEADER: &str = "problem,loss,nu_or_order,mode,seed,rel_l2,theta_hat,iters,wall_s,status";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes/updates `report.json` and `results.csv` in `out_dir`, and one
/// `trace_<seed>.csv` per given trace under a per-row subdirectory.
/// Re-emitting the same report replaces its rows and leaves others alone.
pub fn emit_report(
    report: &RunReport,
    traces: &[(u64, Vec<TracePoint>)],
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;

    // report.json: array of reports, upsert by row key.
    let mut reports = load_reports(out_dir)?;
    match reports.iter_mut().find(|r| r.key() == report.key()) {
        Some(slot) => *slot = report.clone(),
        None => reports.push(report.clone()),
    }
    let json = serde_json::to_string_pretty(&reports).expect("reports always serialize");
    write_atomic(&out_dir.join("report.json"), &json)?;

    // results.csv: one row per seed, upsert by (key, seed).
    let csv_path = out_dir.join("results.csv");
    let mut rows: Vec<String> = if csv_path.exists() {
        let text = fs::read_to_string(&csv_path).map_err(Error::io(&csv_path))?;
        text.lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(String::from)
            .collect()
    } else {
        Vec::new()
    };
    for result in &report.results {
        let prefix = format!(
            "{},{},{},{},{},",
            report.problem, report.loss, report.nu_or_order, report.mode, result.seed
        );
        let row = format!(
            "{prefix}{},{},{},{},{}",
            fmt_opt(result.rel_l2),
            fmt_opt(result.theta_hat),
            result.iters,
            result.wall_s,
            result.status
        );
        match rows.iter_mut().find(|r| r.starts_with(&prefix)) {
            Some(slot) => *slot = row,
            None => rows.push(row),
        }
    }
    let mut csv = String::from(RESULTS_HEADER);
    for row in &rows {
        csv.push('\n');
        csv.push_str(row);
    }
    csv.push('\n');
    write_atomic(&csv_path, &csv)?;

    // trace_<seed>.csv under a per-row directory so rows don't clobber
    // each other's plot data.
    if !traces.is_empty() {
        let trace_dir = out_dir.join(report.run_tag());
        fs::create_dir_all(&trace_dir).map_err(Error::io(&trace_dir))?;
        for (seed, points) in traces {
            let mut text = String::from("iter,loss,theta_hat,wall_s\n");
            for p in points {
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    p.iter,
                    p.loss,
                    fmt_opt(p.theta),
                    p.wall_s
                ));
            }
            write_atomic(&trace_dir.join(format!("trace_{seed}.csv")), &text)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Kernel-inverse timing.
// ---------------------------------------------------------------------------

/// Which factorization the timing harness exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KinvMethod {
    /// Sparse kernel-packet factors (Kronecker per axis on tensor grids).
    Kp,
    /// Dense Cholesky — of the full matrix in 1-D, of each Kronecker axis
    /// factor on tensor grids (the full matrix would not fit the cap).
    Dense,
}

impl KinvMethod {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "kp" => Ok(Self::Kp),
            "dense" => Ok(Self::Dense),
            other => Err(Error::Config {
                path: "method".into(),
                reason: format!("unknown method {other:?} (expected kp or dense)"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Kp => "kp",
            Self::Dense => "dense",
        }
    }
}

/// Wall-clock statistics of kernel-inverse construction plus one quadratic
/// form, over several repeats of the identical computation.
#[derive(Debug, Clone, Serialize)]
pub struct KinvTiming {
    pub method: String,
    pub shape: Vec<usize>,
    pub nu: f64,
    pub ell: f64,
    pub repeats: usize,
    pub median_s: f64,
    pub min_s: f64,
    /// The quadratic form value itself, for cross-method agreement checks.
    pub quadratic_form: f64,
}

/// Times `repeats` rounds of (build factor on a uniform grid of `shape`,
/// apply one quadratic form to a fixed random vector). Both methods see the
/// same grid, the same vector, and one untimed warm-up round.
pub fn time_kinverse(
    shape: &[usize],
    params: MaternParams,
    method: KinvMethod,
    repeats: usize,
    dense_cap: usize,
) -> Result<KinvTiming> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Config {
            path: "grid".into(),
            reason: format!("grid shape must be nonempty positive, got {shape:?}"),
        });
    }
    if repeats == 0 {
        return Err(Error::Config {
            path: "repeats".into(),
            reason: "at least one repeat is required".into(),
        });
    }
    let axes = shape
        .iter()
        .map(|&n| Grid1D::linspace(0.0, 1.0, n))
        .collect::<Result<Vec<_>>>()?;
    let grid = TensorGrid::new(axes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x51eed);
    let y: Vec<f64> = (0..grid.n()).map(|_| rng.random_range(-1.0..1.0)).collect();

    let round = || -> Result<f64> {
        match method {
            KinvMethod::Kp => {
                let factor = build_tensor_factor(&vec![params; grid.dim()], &grid)?;
                Ok(factor.quadratic_form(&y))
            }
            KinvMethod::Dense if grid.dim() == 1 => {
                if grid.n() > dense_cap {
                    return Err(Error::DenseCapExceeded {
                        needed: grid.n(),
                        cap: dense_cap,
                    });
                }
                let factor = DenseKernelFactor::new(params, &grid.axes()[0])?;
                Ok(factor.quadratic_form(&y))
            }
            KinvMethod::Dense => {
                for axis in grid.axes() {
                    if axis.len() > dense_cap {
                        return Err(Error::DenseCapExceeded {
                            needed: axis.len(),
                            cap: dense_cap,
                        });
                    }
                }
                let factors = grid
                    .axes()
                    .iter()
                    .map(|axis| DenseKernelFactor::new(params, axis))
                    .collect::<Result<Vec<_>>>()?;
                Ok(dense_axes_quadratic_form(&factors, &grid.shape(), &y))
            }
        }
    };

    round()?; // warm-up, untimed
    let mut times = Vec::with_capacity(repeats);
    let mut value = 0.0;
    for _ in 0..repeats {
        let start = Instant::now();
        value = round()?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(KinvTiming {
        method: method.name().into(),
        shape: shape.to_vec(),
        nu: params.nu(),
        ell: params.ell(),
        repeats,
        median_s: times[times.len() / 2],
        min_s: times[0],
        quadratic_form: value,
    })
}

/// `y^T (K_1 (x) ... (x) K_d)^{-1} y` through per-axis dense factors, where
/// `(x)` is the Kronecker product over the grid axes.
fn dense_axes_quadratic_form(axes: &[DenseKernelFactor], shape: &[usize], y: &[f64]) -> f64 {
    let mut cur = y.to_vec();
    let mut scratch = Vec::new();
    for (k, factor) in axes.iter().enumerate() {
        let len = shape[k];
        let stride: usize = shape[k + 1..].iter().product();
        let outer: usize = shape[..k].iter().product();
        let mut fiber = vec![0.0; len];
        for o in 0..outer {
            let base = o * len * stride;
            for i in 0..stride {
                for (t, slot) in fiber.iter_mut().enumerate() {
                    *slot = cur[base + t * stride + i];
                }
                factor.apply_inverse_in_place(&mut fiber, &mut scratch);
                for (t, slot) in fiber.iter().enumerate() {
                    cur[base + t * stride + i] = *slot;
                }
            }
        }
    }
    y.iter().zip(&cur).map(|(a, b)| a * b).sum()
}

// ---------------------------------------------------------------------------
// The experiment runner.
// ---------------------------------------------------------------------------

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where to write artifacts; `None` computes reports without writing.
    pub out_dir: Option<PathBuf>,
    /// Replaces the config's seed list when set.
    pub seeds: Option<Vec<u64>>,
    /// Truncates every run to two optimizer steps and writes nothing —
    /// a full-pipeline smoke test.
    pub dry_run: bool,
}

/// Runs every loss of the experiment over every seed and returns one report
/// per loss. Losses the solver cannot support at this configuration
/// (unsupported Sobolev order, a dense factor past the memory cap) become
/// reports whose rows carry `skipped` status and a note with the reason;
/// training aborts (divergence, exhausted budget) become failed rows. Only
/// config and I/O errors abort the whole run.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    mode: Mode,
    opts: &RunOptions,
) -> Result<Vec<RunReport>> {
    let spec = cfg.build_spec(mode)?;
    let net = cfg.network(&spec)?;
    let seeds = opts
        .seeds
        .clone()
        .unwrap_or_else(|| cfg.experiment.seeds.clone());
    if seeds.is_empty() {
        return Err(Error::Config {
            path: "seeds".into(),
            reason: "at least one seed is required".into(),
        });
    }
    let config_echo = cfg.to_toml();
    let problem = spec.kind().name();

    let mut reports = Vec::new();
    for tag in cfg.loss_tags() {
        let prepared = match cfg.parse_loss(tag).and_then(|kind| PreparedLoss::build(kind, &spec))
        {
            Ok(prepared) => prepared,
            Err(err @ (Error::UnsupportedSobolevOrder { .. } | Error::DenseCapExceeded { .. })) => {
                let nu_or_order = tag.split_once(':').map(|(_, v)| v).unwrap_or("");
                let mut report = RunReport::new(problem, tag, nu_or_order, mode.name());
                report.seeds = seeds.clone();
                report.config = config_echo.clone();
                report.notes.push(format!("skipped: {err}"));
                report.results = seeds
                    .iter()
                    .map(|&seed| SeedResult {
                        seed,
                        rel_l2: None,
                        theta_hat: None,
                        iters: 0,
                        wall_s: 0.0,
                        status: "skipped".into(),
                    })
                    .collect();
                if let (Some(out_dir), false) = (&opts.out_dir, opts.dry_run) {
                    emit_report(&report, &[], out_dir)?;
                }
                reports.push(report);
                continue;
            }
            Err(err) => return Err(err),
        };

        let kind = prepared.kind();
        let mut report = RunReport::new(problem, &kind.name(), &kind.nu_label(), mode.name());
        report.seeds = seeds.clone();
        report.config = config_echo.clone();
        if !spec.has_reference() {
            report
                .notes
                .push("no reference solution; rel_l2 omitted".into());
        }

        let mut traces = Vec::new();
        for &seed in &seeds {
            let mut train_cfg = cfg.train_config(seed, mode)?;
            if opts.dry_run {
                train_cfg.n_iter = 2;
                train_cfg.log_every = 1;
            }
            let trace = train(&spec, &net, &prepared, &train_cfg)?;
            // Dry runs smoke the training pipeline only; scoring a reference
            // solution over the full test grid can dwarf two iterations.
            let rel_l2 = if opts.dry_run || trace.status.is_diverged() || !spec.has_reference() {
                None
            } else {
                Some(test_error(&spec, &net, &trace.params)?)
            };
            report.results.push(SeedResult {
                seed,
                rel_l2,
                theta_hat: trace.theta(&net, mode),
                iters: trace.steps,
                wall_s: trace.wall_s,
                status: trace.status.tag().into(),
            });
            traces.push((seed, trace.points));
        }
        report.finalize_stats();
        if let (Some(out_dir), false) = (&opts.out_dir, opts.dry_run) {
            emit_report(&report, &traces, out_dir)?;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Timing file for `bench-kinv` runs, appended per invocation.
pub fn emit_timing(timing: &KinvTiming, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let path: PathBuf = out_dir.join("kinv_timings.json");
    let mut entries: Vec<serde_json::Value> = if path.exists() {
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        serde_json::from_str(&text).unwrap_or_default()
    } else {
        Vec::new()
    };
    entries.push(serde_json::to_value(timing).expect("timing always serializes"));
    let json = serde_json::to_string_pretty(&entries).expect("timings always serialize");
    write_atomic(&path, &json)
}
