//! Full-batch training loop: Adam descent on a prepared loss.
//!
//! The loop is deliberately plain — fixed collocation grids, full batches,
//! one Adam instance — because the kernel factorizations are loop-invariant:
//! [`crate::losses::PreparedLoss`] builds them once, and the loop only
//! evaluates. Inverse problems append the unknown physical coefficient as one
//! extra trailing entry of the parameter vector, so the same optimizer state
//! covers network weights and the coefficient alike.
//!
//! Runs never lose their history: divergence, wall-clock exhaustion and
//! convergence all return the partial [`TrainTrace`] with a status tag
//! instead of an error, so callers can persist what happened.

use std::time::{Duration, Instant};

use crate::losses::{loss_gradient, PreparedLoss};
use crate::network::MlpConfig;
use crate::packet;
use crate::residuals::{Mode, ProblemSpec};
use crate::{Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    fn validate(&self) -> Result<()> {
        let bad = |path: &str, reason: String| Error::Config {
            path: path.into(),
            reason,
        };
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(bad("adam.lr", format!("learning rate must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("adam.beta1", self.beta1), ("adam.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(bad(name, format!("momentum decay must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(bad("adam.eps", format!("epsilon must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update, in place. Deterministic; rejects
/// non-finite gradients so the caller can abort with its trace intact.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grad: &[f64],
    opt: &AdamParams,
) -> Result<()> {
    if state.m.len() != params.len() || grad.len() != params.len() {
        return Err(Error::DimensionMismatch {
            context: "adam step",
            expected: state.m.len(),
            got: grad.len().max(params.len()),
        });
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    state.t += 1;
    let bc1 = 1.0 - opt.beta1.powi(state.t as i32);
    let bc2 = 1.0 - opt.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * grad[i];
        state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
    Ok(())
}

/// Everything a training run needs besides the problem, network and loss.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Number of optimizer iterations; at least 1.
    pub n_iter: usize,
    pub adam: AdamParams,
    /// Seed for the network initialization; the loop itself is deterministic.
    pub seed: u64,
    pub mode: Mode,
    /// Overrides the problem's default initial coefficient (inverse mode).
    pub theta_init: Option<f64>,
    /// Record a trace point every this many iterations (>= 1); the first and
    /// last iterations are always recorded.
    pub log_every: usize,
    /// Stop early once the loss falls to this value or below.
    pub loss_floor: f64,
    /// Stop after this many iterations without improvement; 0 disables.
    pub patience: usize,
    /// Graceful wall-clock cutoff for the whole run.
    pub wall_budget: Option<Duration>,
}

impl TrainConfig {
    pub fn new(n_iter: usize, seed: u64, mode: Mode) -> Self {
        Self {
            n_iter,
            adam: AdamParams::default(),
            seed,
            mode,
            theta_init: None,
            log_every: 100,
            loss_floor: 0.0,
            patience: 0,
            wall_budget: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(Error::Config {
                path: "n_iter".into(),
                reason: "at least one iteration is required".into(),
            });
        }
        if self.log_every == 0 {
            return Err(Error::Config {
                path: "log_every".into(),
                reason: "logging cadence must be >= 1".into(),
            });
        }
        self.adam.validate()
    }
}

/// How a training run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStatus {
    /// Ran all configured iterations.
    Completed,
    /// Loss reached the configured floor.
    Converged { iter: usize },
    /// No improvement for `patience` iterations.
    Stalled { iter: usize },
    /// Loss or gradient became non-finite; the trace holds the run so far.
    Diverged { iter: usize },
    /// Wall-clock budget exhausted before the iteration count.
    BudgetExhausted { iter: usize },
}

impl TrainStatus {
    /// Short machine-readable tag for result tables.
    pub fn tag(&self) -> &'static str {
        match self {
            TrainStatus::Completed => "completed",
            TrainStatus::Converged { .. } => "converged",
            TrainStatus::Stalled { .. } => "stalled",
            TrainStatus::Diverged { .. } => "diverged",
            TrainStatus::BudgetExhausted { .. } => "budget-exhausted",
        }
    }

    pub fn is_diverged(&self) -> bool {
        matches!(self, TrainStatus::Diverged { .. })
    }
}

/// One logged step: loss (and coefficient estimate) before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iter: usize,
    pub loss: f64,
    /// Current coefficient estimate; `None` in forward mode.
    pub theta: Option<f64>,
    /// Seconds since the start of the run.
    pub wall_s: f64,
}

/// The full history and outcome of one training run.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub points: Vec<TracePoint>,
    /// Final flat parameter vector (network weights, then the coefficient in
    /// inverse mode).
    pub params: Vec<f64>,
    pub status: TrainStatus,
    /// Number of optimizer steps actually performed.
    pub steps: usize,
    pub wall_s: f64,
}

impl TrainTrace {
    /// Final coefficient estimate, if the run estimated one.
    pub fn theta(&self, net: &MlpConfig, mode: Mode) -> Option<f64> {
        match mode {
            Mode::Forward => None,
            Mode::Inverse => self.params.get(net.param_count()).copied(),
        }
    }

    /// Loss at the last recorded point.
    pub fn final_loss(&self) -> Option<f64> {
        self.points.last().map(|p| p.loss)
    }
}

/// Runs the training loop: gradient, bookkeeping, Adam step, repeat.
///
/// `prepared` must have been built for `spec` beforehand — the loop performs
/// no factorization work, and asserts as much via the global factor
/// construction counter.
pub fn train(
    spec: &ProblemSpec,
    net: &MlpConfig,
    prepared: &PreparedLoss,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let mut params = net.init(cfg.seed);
    if cfg.mode == Mode::Inverse {
        params.push(cfg.theta_init.unwrap_or(spec.theta().init));
    }
    let theta_of = |params: &[f64]| match cfg.mode {
        Mode::Forward => None,
        Mode::Inverse => Some(params[net.param_count()]),
    };

    let mut state = AdamState::new(params.len());
    let mut points: Vec<TracePoint> = Vec::new();
    let start = Instant::now();
    let builds_before = packet::build_count();

    let mut status = TrainStatus::Completed;
    let mut steps = 0usize;
    let mut best = f64::INFINITY;
    let mut best_iter = 0usize;

    for iter in 0..cfg.n_iter {
        let g = loss_gradient(prepared, spec, net, &params, cfg.mode)?;
        let logged = iter % cfg.log_every == 0 || iter + 1 == cfg.n_iter;
        if logged {
            points.push(TracePoint {
                iter,
                loss: g.value,
                theta: theta_of(&params),
                wall_s: start.elapsed().as_secs_f64(),
            });
        }
        if !g.value.is_finite() {
            if !logged {
                points.push(TracePoint {
                    iter,
                    loss: g.value,
                    theta: theta_of(&params),
                    wall_s: start.elapsed().as_secs_f64(),
                });
            }
            status = TrainStatus::Diverged { iter };
            break;
        }
        if g.value <= cfg.loss_floor {
            status = TrainStatus::Converged { iter };
            break;
        }
        if g.value < best {
            best = g.value;
            best_iter = iter;
        } else if cfg.patience > 0 && iter - best_iter >= cfg.patience {
            status = TrainStatus::Stalled { iter };
            break;
        }
        if let Some(budget) = cfg.wall_budget {
            if start.elapsed() >= budget {
                status = TrainStatus::BudgetExhausted { iter };
                break;
            }
        }
        if let Err(Error::NonFiniteGradient { .. }) =
            adam_step(&mut state, &mut params, &g.grad, &cfg.adam)
        {
            status = TrainStatus::Diverged { iter };
            break;
        }
        steps += 1;
    }

    assert_eq!(
        packet::build_count(),
        builds_before,
        "kernel factors must be built before the loop, never inside it"
    );

    Ok(TrainTrace {
        points,
        params,
        status,
        steps,
        wall_s: start.elapsed().as_secs_f64(),
    })
}
