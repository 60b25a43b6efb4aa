//! Experiment configuration files.
//!
//! One TOML file describes a whole experiment: the problem and its
//! collocation scale, the network, the optimizer budget, and the list of
//! losses to run. Every field has a default matching the reference
//! benchmarks, so a config only states what it changes; desk-scale variants
//! shrink grids and iteration counts, nothing else.
//!
//! Unknown keys are rejected (typos surface as errors, not silent defaults),
//! and all validation failures carry the offending field's dotted path.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::losses::LossKind;
use crate::network::MlpConfig;
use crate::residuals::{load_ns_dataset, Mode, ProblemKind, ProblemSpec};
use crate::training::{AdamParams, TrainConfig};
use crate::{Error, Result};

fn bad(path: &str, reason: String) -> Error {
    Error::Config {
        path: path.into(),
        reason,
    }
}

/// Top-level experiment description. Only the problem section matching
/// `experiment.problem` is consulted; the others keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub stiff: StiffSection,
    #[serde(default)]
    pub helmholtz: HelmholtzSection,
    #[serde(default)]
    pub lqg: LqgSection,
    #[serde(default)]
    pub ns: NsSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// `stiff`, `helmholtz`, `lqg` or `ns`.
    pub problem: String,
    /// Loss tags to run, one result row each (see [`LossKind::parse`]).
    pub losses: Vec<String>,
    /// Kernel length scale for the kernel-norm losses, per axis.
    pub ell: f64,
    /// Boundary weight for the kernel-norm and Sobolev losses.
    pub lambda_b: f64,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            problem: String::new(),
            losses: vec!["rkhs-kp:0.5".into()],
            ell: 1.0,
            lambda_b: 1.0,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StiffSection {
    /// True decay coefficient of `u' = lambda u + e^{-t}`.
    pub lambda: f64,
    /// Initial condition `u(0)`.
    pub mu: f64,
    pub n_interior: usize,
    pub n_test: usize,
    /// Starting coefficient estimate for inverse runs.
    pub theta_init: f64,
}

impl Default for StiffSection {
    fn default() -> Self {
        Self {
            lambda: -2.0,
            mu: 2.0,
            n_interior: 50,
            n_test: 2000,
            theta_init: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HelmholtzSection {
    /// True wavenumber.
    pub k: f64,
    pub n_interior: [usize; 2],
    /// Boundary collocation points per edge.
    pub edge_points: usize,
    pub n_test: [usize; 2],
    pub theta_init: f64,
}

impl Default for HelmholtzSection {
    fn default() -> Self {
        Self {
            k: 1.0,
            n_interior: [100, 100],
            edge_points: 100,
            n_test: [500, 600],
            theta_init: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqgSection {
    /// True control cost coefficient.
    pub mu: f64,
    pub horizon: f64,
    /// Spatial box, one `[lo, hi]` pair per axis.
    pub bounds: [[f64; 2]; 2],
    /// (x1, x2, t) interior grid.
    pub n_interior: [usize; 3],
    /// Terminal-condition grid at `t = horizon`.
    pub n_terminal: [usize; 2],
    pub n_test: [usize; 3],
    /// Gauss-Hermite nodes per axis for the reference solution.
    pub gh_nodes: usize,
    pub theta_init: f64,
}

impl Default for LqgSection {
    fn default() -> Self {
        Self {
            mu: 1.0,
            horizon: 1.0,
            bounds: [[-1.0, 1.0], [-1.0, 1.0]],
            n_interior: [30, 20, 10],
            n_terminal: [45, 45],
            n_test: [100, 80, 50],
            gh_nodes: 240,
            theta_init: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NsSection {
    /// True viscosity.
    pub mu: f64,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub horizon: f64,
    /// (x, y, t) interior grid.
    pub n_interior: [usize; 3],
    /// (x, y, t) point counts from which each boundary face draws its two
    /// relevant axes.
    pub face_points: [usize; 3],
    pub n_test: [usize; 3],
    /// Velocity observation table (`t,x,y,u,v` CSV). When set, inverse runs
    /// fit these observations instead of synthetic boundary data.
    pub dataset: Option<PathBuf>,
    pub theta_init: f64,
}

impl Default for NsSection {
    fn default() -> Self {
        Self {
            mu: 0.01,
            x_range: [1.0, 8.0],
            y_range: [-2.0, 2.0],
            horizon: 1.9,
            n_interior: [30, 20, 10],
            face_points: [30, 20, 10],
            n_test: [98, 48, 20],
            dataset: None,
            theta_init: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Defaults to 20000 for the stiff problem, 30000 otherwise.
    pub n_iter: Option<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub log_every: usize,
    pub loss_floor: f64,
    pub patience: usize,
    /// Wall-clock budget in seconds; absent means unlimited.
    pub wall_budget_s: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let adam = AdamParams::default();
        Self {
            n_iter: None,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            log_every: 100,
            loss_floor: 0.0,
            patience: 0,
            wall_budget_s: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Parses and validates; `origin` labels parse errors (usually the file
    /// path).
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)
            .map_err(|e| bad(origin, format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// The config serialized back to TOML — the reproducibility echo that
    /// run reports embed.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configs always serialize")
    }

    pub fn problem_kind(&self) -> Result<ProblemKind> {
        match self.experiment.problem.as_str() {
            "stiff" => Ok(ProblemKind::Stiff),
            "helmholtz" => Ok(ProblemKind::Helmholtz),
            "lqg" => Ok(ProblemKind::Lqg),
            "ns" => Ok(ProblemKind::Ns),
            other => Err(bad(
                "experiment.problem",
                format!("unknown problem {other:?} (expected stiff, helmholtz, lqg or ns)"),
            )),
        }
    }

    /// Structural validation: every failure names the offending field.
    /// Loss tags with an unsupported Sobolev order pass — the runner emits
    /// them as skipped rows rather than refusing the whole experiment.
    pub fn validate(&self) -> Result<()> {
        self.problem_kind()?;
        let e = &self.experiment;
        if e.losses.is_empty() {
            return Err(bad("experiment.losses", "at least one loss is required".into()));
        }
        for tag in &e.losses {
            match self.parse_loss(tag) {
                Ok(_) | Err(Error::UnsupportedSobolevOrder { .. }) => {}
                Err(err) => return Err(err),
            }
        }
        if !(e.ell.is_finite() && e.ell > 0.0) {
            return Err(bad("experiment.ell", format!("length scale must be > 0, got {}", e.ell)));
        }
        if e.seeds.is_empty() {
            return Err(bad("experiment.seeds", "at least one seed is required".into()));
        }
        if self.network.hidden.is_empty() || self.network.hidden.contains(&0) {
            return Err(bad(
                "network.hidden",
                format!("hidden widths must be nonempty positive, got {:?}", self.network.hidden),
            ));
        }
        // Optimizer settings: reuse the training-side checks verbatim.
        self.train_config(0, Mode::Forward)?.validate()?;
        // lambda_b bounds are enforced by the loss constructor.
        LossKind::l2().with_lambda_b(e.lambda_b)?;
        Ok(())
    }

    /// Builds the problem at the configured scale. Inverse mode attaches the
    /// configured dataset (NS) or synthetic observations on the interior
    /// grid (all other problems).
    pub fn build_spec(&self, mode: Mode) -> Result<ProblemSpec> {
        let spec = match self.problem_kind()? {
            ProblemKind::Stiff => {
                let s = &self.stiff;
                ProblemSpec::stiff(s.lambda, s.theta_init, s.mu, s.n_interior, s.n_test)?
            }
            ProblemKind::Helmholtz => {
                let h = &self.helmholtz;
                ProblemSpec::helmholtz(h.k, h.theta_init, h.n_interior, h.edge_points, h.n_test)?
            }
            ProblemKind::Lqg => {
                let l = &self.lqg;
                ProblemSpec::lqg(
                    l.mu,
                    l.theta_init,
                    l.horizon,
                    l.bounds,
                    l.n_interior,
                    l.n_terminal,
                    l.n_test,
                    l.gh_nodes,
                )?
            }
            ProblemKind::Ns => {
                let n = &self.ns;
                match (&n.dataset, mode) {
                    (Some(path), Mode::Inverse) => {
                        let table = load_ns_dataset(path)?;
                        ProblemSpec::ns_dataset(&table, n.mu, n.theta_init, n.n_interior)?
                    }
                    _ => ProblemSpec::ns_synthetic(
                        n.mu,
                        n.theta_init,
                        n.x_range,
                        n.y_range,
                        n.horizon,
                        n.n_interior,
                        n.face_points,
                        n.n_test,
                    )?,
                }
            }
        };
        if mode == Mode::Inverse && spec.data().is_none() {
            spec.with_synthetic_data()
        } else {
            Ok(spec)
        }
    }

    pub fn network(&self, spec: &ProblemSpec) -> Result<MlpConfig> {
        MlpConfig::new(spec.input_dim(), self.network.hidden.clone(), spec.heads())
    }

    pub fn loss_tags(&self) -> &[String] {
        &self.experiment.losses
    }

    /// Resolves one loss tag with the experiment's length scale and
    /// boundary weight applied.
    pub fn parse_loss(&self, tag: &str) -> Result<LossKind> {
        LossKind::parse(tag, self.experiment.ell)?.with_lambda_b(self.experiment.lambda_b)
    }

    pub fn train_config(&self, seed: u64, mode: Mode) -> Result<TrainConfig> {
        let default_iters = match self.problem_kind()? {
            ProblemKind::Stiff => 20_000,
            _ => 30_000,
        };
        let t = &self.train;
        let mut cfg = TrainConfig::new(t.n_iter.unwrap_or(default_iters), seed, mode);
        cfg.adam = AdamParams {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
        };
        cfg.log_every = t.log_every;
        cfg.loss_floor = t.loss_floor;
        cfg.patience = t.patience;
        cfg.wall_budget = t.wall_budget_s.map(Duration::from_secs_f64);
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_stiff_toml() -> &'static str {
        r#"
            [experiment]
            problem = "stiff"
            losses = ["rkhs-kp:0.5", "l2"]
            seeds = [0, 1]

            [stiff]
            n_interior = 10
            n_test = 50

            [network]
            hidden = [8]

            [train]
            n_iter = 40
            log_every = 10
        "#
    }

    #[test]
    fn minimal_config_gets_reference_defaults() {
        let cfg = ExperimentConfig::from_toml("[experiment]\nproblem = \"stiff\"", "t").unwrap();
        assert_eq!(cfg.stiff.n_interior, 50);
        assert_eq!(cfg.stiff.n_test, 2000);
        assert_eq!(cfg.experiment.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.network.hidden, vec![16, 16]);
        let tc = cfg.train_config(0, Mode::Forward).unwrap();
        assert_eq!(tc.n_iter, 20_000);

        let cfg = ExperimentConfig::from_toml("[experiment]\nproblem = \"lqg\"", "t").unwrap();
        assert_eq!(cfg.lqg.n_interior, [30, 20, 10]);
        assert_eq!(cfg.train_config(0, Mode::Forward).unwrap().n_iter, 30_000);
    }

    #[test]
    fn desk_config_builds_spec_network_and_losses() {
        let cfg = ExperimentConfig::from_toml(desk_stiff_toml(), "t").unwrap();
        let spec = cfg.build_spec(Mode::Forward).unwrap();
        assert_eq!(spec.kind(), ProblemKind::Stiff);
        assert_eq!(spec.interior().n(), 10);
        assert!(spec.data().is_none());

        let inverse = cfg.build_spec(Mode::Inverse).unwrap();
        assert!(inverse.data().is_some(), "inverse mode gets synthetic data");

        let net = cfg.network(&spec).unwrap();
        assert_eq!(net.input_dim(), 1);
        assert_eq!(net.hidden(), &[8]);

        let kinds: Vec<LossKind> = cfg
            .loss_tags()
            .iter()
            .map(|t| cfg.parse_loss(t).unwrap())
            .collect();
        assert_eq!(kinds[0], LossKind::rkhs_kp(0.5, 1.0).unwrap());
        assert_eq!(kinds[1], LossKind::l2());

        let tc = cfg.train_config(1, Mode::Inverse).unwrap();
        assert_eq!(tc.n_iter, 40);
        assert_eq!(tc.seed, 1);
        assert_eq!(tc.log_every, 10);
    }

    #[test]
    fn toml_echo_round_trips() {
        let cfg = ExperimentConfig::from_toml(desk_stiff_toml(), "t").unwrap();
        let echoed = ExperimentConfig::from_toml(&cfg.to_toml(), "echo").unwrap();
        assert_eq!(cfg, echoed);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected_with_paths() {
        let err = ExperimentConfig::from_toml(
            "[experiment]\nproblem = \"stiff\"\ntypo_field = 1",
            "t",
        )
        .err()
        .unwrap();
        assert!(err.to_string().contains("typo_field"), "{err}");

        let err = ExperimentConfig::from_toml("[experiment]\nproblem = \"heat\"", "t")
            .err()
            .unwrap();
        assert!(err.to_string().contains("experiment.problem"), "{err}");

        let err = ExperimentConfig::from_toml(
            "[experiment]\nproblem = \"stiff\"\n[train]\nlr = -1.0",
            "t",
        )
        .err()
        .unwrap();
        assert!(err.to_string().contains("adam.lr"), "{err}");

        let err = ExperimentConfig::from_toml(
            "[experiment]\nproblem = \"stiff\"\nlosses = [\"nonsense\"]",
            "t",
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn unsupported_sobolev_order_passes_validation() {
        // The runner reports such rows as skipped; the config itself is fine.
        let cfg = ExperimentConfig::from_toml(
            "[experiment]\nproblem = \"stiff\"\nlosses = [\"sobolev:3\", \"l2\"]",
            "t",
        )
        .unwrap();
        assert!(matches!(
            cfg.parse_loss("sobolev:3"),
            Err(Error::UnsupportedSobolevOrder { order: 3 })
        ));
    }

    #[test]
    fn ns_dataset_mode_switches_on_file_and_mode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        let table = crate::residuals::NsTable {
            rows: vec![
                [0.1, 2.0, 0.5, 0.3, -0.2],
                [0.4, 3.0, -0.5, 0.1, 0.2],
                [0.7, 5.0, 1.0, -0.3, 0.1],
            ],
        };
        crate::residuals::write_ns_dataset(&path, &table).unwrap();
        let toml_text = format!(
            "[experiment]\nproblem = \"ns\"\n[ns]\nn_interior = [4, 4, 3]\nface_points = [3, 3, 2]\nn_test = [4, 4, 3]\ndataset = {:?}",
            path.display().to_string()
        );
        let cfg = ExperimentConfig::from_toml(&toml_text, "t").unwrap();

        let inverse = cfg.build_spec(Mode::Inverse).unwrap();
        let data = inverse.data().unwrap();
        assert!(data.grid.is_none(), "dataset observations are scattered");
        assert_eq!(data.points.len(), 3);
        assert!(inverse.segments().is_empty());

        let forward = cfg.build_spec(Mode::Forward).unwrap();
        assert!(forward.data().is_none());
        assert!(!forward.segments().is_empty());
    }
}
