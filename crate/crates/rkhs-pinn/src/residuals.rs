//! Benchmark differential-equation problems and their residual fields.
//!
//! Four problems exercise the solver across regimes:
//!
//! - **Stiff ODE**: `u' - lambda*u = e^{-t}` on `t in [0, 5]` with
//!   `u(0) = mu`; closed-form solution, steep transient for `lambda < 0`.
//! - **Helmholtz**: `Delta u + k^2 u = p` on `[-1, 1]^2` with zero Dirichlet
//!   data and a manufactured source, so `u = (x+y) sin(pi x) sin(pi y)`.
//! - **LQG control (HJB)**: `u_t + Delta u = mu * |grad_x u|^2` on
//!   `R^2 x [0, T]` with terminal cost `g(x) = ln((1 + |x|^2)/2)`; the
//!   Cole-Hopf solution is a Gaussian expectation evaluated here by tensor
//!   Gauss-Hermite quadrature.
//! - **Navier-Stokes (vorticity form)**: two network heads approximate the
//!   stream function `psi` and vorticity `omega`; the momentum residual uses
//!   `u = psi_y`, `v = -psi_x`, and a Poisson residual
//!   `omega + psi_xx + psi_yy` ties the heads together, which caps the
//!   required derivatives at order two. A closed-form Taylor-Green vortex
//!   provides a reference field; real observations can be loaded from CSV.
//!
//! Every residual is written once, generically over [`Scalar`], so the same
//! code path produces plain numbers (evaluation), Taylor jets (reference
//! checks), and tape variables (training). A [`FieldSource`] supplies the
//! solution fields at a point as [`FieldJet`]s — value plus the derivatives
//! the problem needs — and [`assemble_residuals`] walks the collocation
//! layout to build grid-ordered residual vectors.
//!
//! Each problem also carries one scalar inverse parameter `theta` (`lambda`,
//! `k`, `mu`, and the viscosity respectively): in forward mode it is pinned
//! to its true value, in inverse mode the trainer estimates it from
//! observation data.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Jet, JetComp, JetLayout, Scalar, Tape, Var, MAX_COMPS};
use crate::kernel::{Grid1D, TensorGrid};
use crate::network::MlpConfig;
use crate::quadrature::GaussHermite;
use crate::{Error, Result};

/// Which benchmark a [`ProblemSpec`] instantiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Stiff,
    Helmholtz,
    Lqg,
    Ns,
}

impl ProblemKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemKind::Stiff => "stiff",
            ProblemKind::Helmholtz => "helmholtz",
            ProblemKind::Lqg => "lqg",
            ProblemKind::Ns => "ns",
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether the equation parameter is known or estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// `theta` is fixed at its true value; no observation term.
    Forward,
    /// `theta` is trainable from `theta.init`; observations enter the loss.
    Inverse,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Forward => "forward",
            Mode::Inverse => "inverse",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The scalar equation parameter a problem exposes for inverse estimation.
#[derive(Debug, Clone, Copy)]
pub struct ThetaSpec {
    pub name: &'static str,
    /// Value used in forward mode and to synthesize observations.
    pub truth: f64,
    /// Initial guess for inverse training.
    pub init: f64,
}

/// One boundary (or initial/terminal) piece of the collocation layout.
///
/// `grid` is the segment's *intrinsic* tensor grid over its free coordinates
/// (one dimension lower than the domain); `points` embeds those grid points
/// into the full domain in grid-flat order; `targets[o][i]` is the imposed
/// value of observable `o` at point `i`.
#[derive(Debug, Clone)]
pub struct Segment {
    pub name: &'static str,
    pub grid: TensorGrid,
    pub points: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

/// Observation data for inverse problems.
///
/// When the observation points form a tensor grid (`grid` is `Some`), RKHS
/// losses can factorize over it; scattered points (a loaded dataset) keep
/// `grid = None` and the data term falls back to a plain L2 mean.
#[derive(Debug, Clone)]
pub struct DataSet {
    pub grid: Option<TensorGrid>,
    pub points: Vec<Vec<f64>>,
    /// `values[o][i]`: observable `o` at point `i`.
    pub values: Vec<Vec<f64>>,
}

/// Internal per-problem fixed parameters.
#[derive(Debug, Clone)]
enum Model {
    Stiff { mu: f64 },
    Helmholtz,
    Lqg { horizon: f64, quad: LqgQuad },
    Ns { synthetic: bool },
}

/// A fully-instantiated benchmark problem: equations, domain, collocation
/// layout, reference solution, and the inverse parameter slot.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    kind: ProblemKind,
    model: Model,
    theta: ThetaSpec,
    layout: JetLayout,
    heads: usize,
    interior: TensorGrid,
    segments: Vec<Segment>,
    data: Option<DataSet>,
    test: TensorGrid,
}

/// Value and derivatives of one solution field at one point, over any
/// scalar backend.
///
/// Mirrors a Taylor jet, but each component is itself a scalar `S` — for
/// `S = Var` the components are tape nodes extracted from a network head's
/// jet, so residuals written against `FieldJet` differentiate end-to-end.
#[derive(Debug, Clone, Copy)]
pub struct FieldJet<S> {
    layout: JetLayout,
    c: [S; MAX_COMPS],
}

impl<S: Scalar> FieldJet<S> {
    /// Builds the jet by asking `f` for each component the layout carries,
    /// in storage order.
    pub fn from_fn(layout: JetLayout, mut f: impl FnMut(JetComp) -> Result<S>) -> Result<Self> {
        let mut vals = Vec::with_capacity(layout.n_comps());
        vals.push(f(JetComp::Value)?);
        if layout.order() >= 1 {
            for axis in 0..layout.dim() {
                vals.push(f(JetComp::Grad(axis))?);
            }
        }
        for &(i, j) in layout.hess_pairs() {
            vals.push(f(JetComp::Hess(i, j))?);
        }
        let pad = vals[0];
        let mut it = vals.into_iter();
        let c = core::array::from_fn(|_| it.next().unwrap_or(pad));
        Ok(Self { layout, c })
    }

    pub fn layout(&self) -> JetLayout {
        self.layout
    }

    pub fn value(&self) -> S {
        self.c[0]
    }

    /// First derivative along `axis`.
    pub fn d(&self, axis: usize) -> S {
        let idx = self
            .layout
            .comp_index(JetComp::Grad(axis))
            .expect("residual requested a derivative the layout lacks");
        self.c[idx]
    }

    /// Second derivative along axes `i`, `j`.
    pub fn dd(&self, i: usize, j: usize) -> S {
        let idx = self
            .layout
            .comp_index(JetComp::Hess(i, j))
            .expect("residual requested a second derivative the layout lacks");
        self.c[idx]
    }
}

impl FieldJet<f64> {
    /// Copies a plain Taylor jet's components.
    pub fn from_jet(jet: &Jet) -> Self {
        let layout = jet.layout();
        Self::from_fn(layout, |comp| jet.comp(comp)).expect("jet carries its own layout")
    }
}

/// Supplies solution-field jets at a requested point.
pub trait FieldSource<S: Scalar> {
    /// One [`FieldJet`] per network head (or exact field), in head order.
    fn fields(&mut self, point: &[f64]) -> Result<Vec<FieldJet<S>>>;
}

/// Training source: records the network onto a tape at each point and
/// extracts the components as differentiable variables.
pub struct NetworkSource<'t, 'n> {
    pub tape: &'t Tape,
    pub net: &'n MlpConfig,
    /// Index of the network's first parameter in the tape's parameter vector.
    pub offset: usize,
}

impl<'t, 'n> FieldSource<Var<'t>> for NetworkSource<'t, 'n> {
    fn fields(&mut self, point: &[f64]) -> Result<Vec<FieldJet<Var<'t>>>> {
        let inputs = point
            .iter()
            .enumerate()
            .map(|(axis, &v)| self.tape.input(axis, v))
            .collect::<Result<Vec<_>>>()?;
        let heads = self.net.emit(self.tape, &inputs, self.offset);
        heads
            .into_iter()
            .map(|h| FieldJet::from_fn(self.tape.layout(), |comp| self.tape.extract(h, comp)))
            .collect()
    }
}

/// Wraps a [`FieldSource`] with a same-point cache, so grids that share
/// points — synthetic observations on the collocation grid, boundary faces
/// on grid lines — pay for each field evaluation once per assembly.
///
/// Points are keyed by their exact bit patterns: only coordinates copied
/// from the same grid hit the cache, which is exactly the reuse that is
/// numerically safe.
pub struct CachedSource<'a, S> {
    source: &'a mut dyn FieldSource<S>,
    memo: HashMap<Vec<u64>, Vec<FieldJet<S>>>,
}

impl<'a, S: Scalar> CachedSource<'a, S> {
    pub fn new(source: &'a mut dyn FieldSource<S>) -> Self {
        Self {
            source,
            memo: HashMap::new(),
        }
    }
}

impl<S: Scalar> FieldSource<S> for CachedSource<'_, S> {
    fn fields(&mut self, point: &[f64]) -> Result<Vec<FieldJet<S>>> {
        let key: Vec<u64> = point.iter().map(|v| v.to_bits()).collect();
        if let Some(hit) = self.memo.get(&key) {
            return Ok(hit.clone());
        }
        let fields = self.source.fields(point)?;
        self.memo.insert(key, fields.clone());
        Ok(fields)
    }
}

/// Evaluation source: a frozen parameter vector, evaluated through Taylor
/// jets; no tape, no gradients.
pub struct FrozenNetworkSource<'a> {
    pub net: &'a MlpConfig,
    pub params: &'a [f64],
    pub offset: usize,
    pub layout: JetLayout,
}

impl FieldSource<f64> for FrozenNetworkSource<'_> {
    fn fields(&mut self, point: &[f64]) -> Result<Vec<FieldJet<f64>>> {
        let mut cur = point
            .iter()
            .enumerate()
            .map(|(axis, &v)| Jet::input(self.layout, v, axis))
            .collect::<Result<Vec<_>>>()?;
        self.net.forward_scalar(self.params, self.offset, &mut cur);
        Ok(cur.iter().map(FieldJet::from_jet).collect())
    }
}

/// Reference source: the problem's exact solution, evaluated through Taylor
/// jets. Lets every loss be audited against a known-perfect field.
pub struct ExactSource<'a> {
    pub spec: &'a ProblemSpec,
}

impl FieldSource<f64> for ExactSource<'_> {
    fn fields(&mut self, point: &[f64]) -> Result<Vec<FieldJet<f64>>> {
        let jets = self.spec.exact_head_jets(point)?;
        Ok(jets.iter().map(FieldJet::from_jet).collect())
    }
}

/// Residual vectors for one (segment, observable) pair, grid-ordered over
/// the segment's intrinsic grid.
#[derive(Debug, Clone)]
pub struct SegmentResiduals<S> {
    pub segment: usize,
    pub observable: usize,
    pub values: Vec<S>,
}

/// Residual vectors for one observable over the observation points.
#[derive(Debug, Clone)]
pub struct DataResiduals<S> {
    pub observable: usize,
    pub values: Vec<S>,
    /// Whether the observation points form a tensor grid (RKHS-factorizable).
    pub tensor: bool,
}

/// Everything a loss needs: interior equation residuals (one vector per
/// equation, grid-ordered), boundary residuals per (segment, observable),
/// and observation mismatches in inverse mode.
#[derive(Debug, Clone)]
pub struct ResidualBatch<S> {
    pub interior: Vec<Vec<S>>,
    pub boundary: Vec<SegmentResiduals<S>>,
    pub data: Vec<DataResiduals<S>>,
}

impl ProblemSpec {
    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn theta(&self) -> ThetaSpec {
        self.theta
    }

    /// Jet layout residual evaluation needs (dimension, derivative order).
    pub fn layout(&self) -> JetLayout {
        self.layout
    }

    /// The lighter jet layout that observable extraction needs: boundary and
    /// data residuals read head values — plus first derivatives where an
    /// observable is derived from them (the vorticity problem's velocities) —
    /// but never second derivatives. Recording those batches at this layout
    /// instead of [`ProblemSpec::layout`] cuts most of their tape cost.
    pub fn observable_layout(&self) -> JetLayout {
        let order = match self.model {
            Model::Ns { .. } => 1,
            _ => 0,
        };
        JetLayout::new(self.input_dim(), order, false)
            .expect("input dimension was validated at construction")
    }

    /// Number of network heads (solution fields).
    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Number of interior equations (1, or 2 for the two-head problem).
    pub fn equations(&self) -> usize {
        match self.model {
            Model::Ns { .. } => 2,
            _ => 1,
        }
    }

    /// Number of observables compared against targets/observations.
    pub fn observables(&self) -> usize {
        match self.model {
            Model::Ns { .. } => 2,
            _ => 1,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.interior.dim()
    }

    pub fn interior(&self) -> &TensorGrid {
        &self.interior
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn data(&self) -> Option<&DataSet> {
        self.data.as_ref()
    }

    pub fn test_grid(&self) -> &TensorGrid {
        &self.test
    }

    /// Whether a closed-form (or quadrature) reference solution exists.
    pub fn has_reference(&self) -> bool {
        !matches!(self.model, Model::Ns { synthetic: false })
    }

    /// Exact solution fields at `point` as Taylor jets (one per head),
    /// derived with the true parameter value.
    pub fn exact_head_jets(&self, point: &[f64]) -> Result<Vec<Jet>> {
        let l = self.layout;
        match &self.model {
            Model::Stiff { mu } => {
                let t = Jet::input(l, point[0], 0)?;
                Ok(vec![stiff_exact_scalar(self.theta.truth, *mu, t)])
            }
            Model::Helmholtz => {
                let x = Jet::input(l, point[0], 0)?;
                let y = Jet::input(l, point[1], 1)?;
                Ok(vec![helmholtz_exact_scalar(x, y)])
            }
            Model::Lqg { horizon, quad } => {
                let x1 = Jet::input(l, point[0], 0)?;
                let x2 = Jet::input(l, point[1], 1)?;
                let t = Jet::input(l, point[2], 2)?;
                Ok(vec![quad.value(self.theta.truth, *horizon, x1, x2, t)])
            }
            Model::Ns { synthetic: true } => {
                let x = Jet::input(l, point[0], 0)?;
                let y = Jet::input(l, point[1], 1)?;
                let t = Jet::input(l, point[2], 2)?;
                let f = taylor_green(self.theta.truth, x, y, t);
                Ok(vec![f.psi, f.omega])
            }
            Model::Ns { synthetic: false } => Err(Error::MissingData {
                context: "dataset-driven problems have no closed-form reference",
            }),
        }
    }

    /// Exact observable values at `point` (`[u]`, or `[u, v]` for the
    /// two-head problem), derived with the true parameter value.
    pub fn exact_observables(&self, point: &[f64]) -> Result<Vec<f64>> {
        match &self.model {
            Model::Stiff { mu } => Ok(vec![stiff_exact_scalar(self.theta.truth, *mu, point[0])]),
            Model::Helmholtz => Ok(vec![helmholtz_exact_scalar(point[0], point[1])]),
            Model::Lqg { horizon, quad } => Ok(vec![quad.value(
                self.theta.truth,
                *horizon,
                point[0],
                point[1],
                point[2],
            )]),
            Model::Ns { synthetic: true } => {
                let f = taylor_green(self.theta.truth, point[0], point[1], point[2]);
                Ok(vec![f.u, f.v])
            }
            Model::Ns { synthetic: false } => Err(Error::MissingData {
                context: "dataset-driven problems have no closed-form reference",
            }),
        }
    }

    /// Attaches synthetic observations: exact observable values on the
    /// interior grid (the usual inverse-mode setup).
    pub fn with_synthetic_data(self) -> Result<Self> {
        let grid = self.interior.clone();
        self.with_synthetic_data_on(grid)
    }

    /// Attaches synthetic observations on a caller-chosen tensor grid.
    pub fn with_synthetic_data_on(mut self, grid: TensorGrid) -> Result<Self> {
        if grid.dim() != self.interior.dim() {
            return Err(Error::DimensionMismatch {
                context: "observation grid dimension",
                expected: self.interior.dim(),
                got: grid.dim(),
            });
        }
        let points = grid.points();
        let mut values = vec![Vec::with_capacity(points.len()); self.observables()];
        for p in &points {
            for (o, v) in self.exact_observables(p)?.into_iter().enumerate() {
                values[o].push(v);
            }
        }
        self.data = Some(DataSet {
            grid: Some(grid),
            points,
            values,
        });
        Ok(self)
    }

    /// The stiff ODE `u' - lambda*u = e^{-t}`, `u(0) = mu`, on `t in [0, 5]`.
    pub fn stiff(
        lambda_true: f64,
        lambda_init: f64,
        mu: f64,
        n_interior: usize,
        n_test: usize,
    ) -> Result<Self> {
        check_nonsingular_lambda(lambda_true)?;
        let interior = TensorGrid::from_axis(Grid1D::linspace(0.0, 5.0, n_interior)?);
        let test = TensorGrid::from_axis(Grid1D::linspace(0.0, 5.0, n_test)?);
        let initial = Segment {
            name: "initial",
            grid: TensorGrid::from_axis(Grid1D::new(vec![0.0])?),
            points: vec![vec![0.0]],
            targets: vec![vec![mu]],
        };
        Ok(Self {
            kind: ProblemKind::Stiff,
            model: Model::Stiff { mu },
            theta: ThetaSpec {
                name: "lambda",
                truth: lambda_true,
                init: lambda_init,
            },
            layout: JetLayout::new(1, 1, false)?,
            heads: 1,
            interior,
            segments: vec![initial],
            data: None,
            test,
        })
    }

    /// The Helmholtz problem `Delta u + k^2 u = p` on `[-1, 1]^2` with zero
    /// Dirichlet data. `edge_points` boundary points per edge; the four
    /// edges partition the boundary (each corner belongs to exactly one).
    pub fn helmholtz(
        k_true: f64,
        k_init: f64,
        n_interior: [usize; 2],
        edge_points: usize,
        n_test: [usize; 2],
    ) -> Result<Self> {
        let interior = TensorGrid::new(vec![
            Grid1D::linspace(-1.0, 1.0, n_interior[0])?,
            Grid1D::linspace(-1.0, 1.0, n_interior[1])?,
        ])?;
        let test = TensorGrid::new(vec![
            Grid1D::linspace(-1.0, 1.0, n_test[0])?,
            Grid1D::linspace(-1.0, 1.0, n_test[1])?,
        ])?;
        if edge_points == 0 {
            return Err(Error::InvalidGrid {
                reason: "boundary edges need at least one point".into(),
            });
        }
        let m = edge_points;
        let h = 2.0 / m as f64;
        // Half-open lattices: "low" edges own the low corner, "high" edges
        // own the high corner, so the four edges partition the boundary.
        let low: Vec<f64> = (0..m).map(|i| -1.0 + h * i as f64).collect();
        let high: Vec<f64> = (0..m).map(|i| -1.0 + h * (i + 1) as f64).collect();
        let edge = |name, fixed_axis: usize, fixed: f64, free: &[f64]| -> Result<Segment> {
            let grid = TensorGrid::from_axis(Grid1D::new(free.to_vec())?);
            let points = embed_points(&grid, fixed_axis, fixed);
            let targets = vec![vec![0.0; points.len()]];
            Ok(Segment {
                name,
                grid,
                points,
                targets,
            })
        };
        let segments = vec![
            edge("bottom", 1, -1.0, &low)?,
            edge("right", 0, 1.0, &low)?,
            edge("top", 1, 1.0, &high)?,
            edge("left", 0, -1.0, &high)?,
        ];
        Ok(Self {
            kind: ProblemKind::Helmholtz,
            model: Model::Helmholtz,
            theta: ThetaSpec {
                name: "k",
                truth: k_true,
                init: k_init,
            },
            layout: JetLayout::new(2, 2, false)?,
            heads: 1,
            interior,
            segments,
            data: None,
            test,
        })
    }

    /// The LQG Hamilton-Jacobi-Bellman problem on `bounds x [0, horizon]`
    /// with terminal cost `g(x) = ln((1 + |x|^2)/2)`.
    ///
    /// Interior time points are strictly inside `(0, horizon)`; the terminal
    /// slice is its own segment. The reference solution integrates the
    /// Cole-Hopf Gaussian expectation with `gh_nodes` Gauss-Hermite nodes
    /// per axis, and construction fails if refining the rule still moves the
    /// values at probe points.
    #[allow(clippy::too_many_arguments)]
    pub fn lqg(
        mu_true: f64,
        mu_init: f64,
        horizon: f64,
        bounds: [[f64; 2]; 2],
        n_interior: [usize; 3],
        n_terminal: [usize; 2],
        n_test: [usize; 3],
        gh_nodes: usize,
    ) -> Result<Self> {
        let quad = LqgQuad::new(gh_nodes)?;
        let refined = LqgQuad::new(gh_nodes + 10)?;
        let tol = 1e-8;
        let mut probes: Vec<[f64; 2]> = vec![[
            0.5 * (bounds[0][0] + bounds[0][1]),
            0.5 * (bounds[1][0] + bounds[1][1]),
        ]];
        for &a in &bounds[0] {
            for &b in &bounds[1] {
                probes.push([a, b]);
            }
        }
        let mut worst = 0.0f64;
        for p in &probes {
            // t = 0 maximizes the diffusion scale, the quadrature's hardest case.
            let coarse: f64 = quad.value(mu_true, horizon, p[0], p[1], 0.0);
            let fine: f64 = refined.value(mu_true, horizon, p[0], p[1], 0.0);
            worst = worst.max((coarse - fine).abs() / (1.0 + fine.abs()));
        }
        if worst > tol {
            return Err(Error::QuadratureNotConverged {
                nodes: gh_nodes,
                nodes_next: gh_nodes + 10,
                rel_change: worst,
                tol,
            });
        }
        let x1 = Grid1D::linspace(bounds[0][0], bounds[0][1], n_interior[0])?;
        let x2 = Grid1D::linspace(bounds[1][0], bounds[1][1], n_interior[1])?;
        let t = Grid1D::linspace_open(0.0, horizon, n_interior[2])?;
        let interior = TensorGrid::new(vec![x1, x2, t])?;
        let terminal_grid = TensorGrid::new(vec![
            Grid1D::linspace(bounds[0][0], bounds[0][1], n_terminal[0])?,
            Grid1D::linspace(bounds[1][0], bounds[1][1], n_terminal[1])?,
        ])?;
        let points = embed_points(&terminal_grid, 2, horizon);
        let targets = vec![points.iter().map(|p| lqg_terminal(&p[..2])).collect()];
        let terminal = Segment {
            name: "terminal",
            grid: terminal_grid,
            points,
            targets,
        };
        let test = TensorGrid::new(vec![
            Grid1D::linspace(bounds[0][0], bounds[0][1], n_test[0])?,
            Grid1D::linspace(bounds[1][0], bounds[1][1], n_test[1])?,
            Grid1D::linspace(0.0, horizon, n_test[2])?,
        ])?;
        Ok(Self {
            kind: ProblemKind::Lqg,
            model: Model::Lqg { horizon, quad },
            theta: ThetaSpec {
                name: "mu",
                truth: mu_true,
                init: mu_init,
            },
            layout: JetLayout::new(3, 2, false)?,
            heads: 1,
            interior,
            segments: vec![terminal],
            data: None,
            test,
        })
    }

    /// Navier-Stokes in the Taylor-Green configuration: observations and
    /// boundary targets come from the closed-form decaying vortex, so the
    /// whole pipeline runs without external data. Axes are `(x, y, t)`.
    ///
    /// `face_shape = [nx, ny, nt]` sets the per-axis resolution of the
    /// boundary faces: the initial slice is `nx x ny`, the `x` faces
    /// `ny x nt`, the `y` faces `nx x nt`.
    pub fn ns_synthetic(
        mu_true: f64,
        mu_init: f64,
        x_range: [f64; 2],
        y_range: [f64; 2],
        horizon: f64,
        n_interior: [usize; 3],
        face_shape: [usize; 3],
        n_test: [usize; 3],
    ) -> Result<Self> {
        let interior = TensorGrid::new(vec![
            Grid1D::linspace(x_range[0], x_range[1], n_interior[0])?,
            Grid1D::linspace(y_range[0], y_range[1], n_interior[1])?,
            Grid1D::linspace(0.0, horizon, n_interior[2])?,
        ])?;
        let test = TensorGrid::new(vec![
            Grid1D::linspace(x_range[0], x_range[1], n_test[0])?,
            Grid1D::linspace(y_range[0], y_range[1], n_test[1])?,
            Grid1D::linspace(0.0, horizon, n_test[2])?,
        ])?;
        let xb = Grid1D::linspace(x_range[0], x_range[1], face_shape[0])?;
        let yb = Grid1D::linspace(y_range[0], y_range[1], face_shape[1])?;
        let tb = Grid1D::linspace(0.0, horizon, face_shape[2])?;
        let face = |name, grid: TensorGrid, fixed_axis: usize, fixed: f64| -> Result<Segment> {
            let points = embed_points(&grid, fixed_axis, fixed);
            let mut targets = vec![Vec::with_capacity(points.len()); 2];
            for p in &points {
                let f = taylor_green(mu_true, p[0], p[1], p[2]);
                targets[0].push(f.u);
                targets[1].push(f.v);
            }
            Ok(Segment {
                name,
                grid,
                points,
                targets,
            })
        };
        let segments = vec![
            face(
                "initial",
                TensorGrid::new(vec![xb.clone(), yb.clone()])?,
                2,
                0.0,
            )?,
            face(
                "x_min",
                TensorGrid::new(vec![yb.clone(), tb.clone()])?,
                0,
                x_range[0],
            )?,
            face(
                "x_max",
                TensorGrid::new(vec![yb, tb.clone()])?,
                0,
                x_range[1],
            )?,
            face(
                "y_min",
                TensorGrid::new(vec![xb.clone(), tb.clone()])?,
                1,
                y_range[0],
            )?,
            face("y_max", TensorGrid::new(vec![xb, tb])?, 1, y_range[1])?,
        ];
        Ok(Self {
            kind: ProblemKind::Ns,
            model: Model::Ns { synthetic: true },
            theta: ThetaSpec {
                name: "mu",
                truth: mu_true,
                init: mu_init,
            },
            layout: JetLayout::new(3, 2, false)?,
            heads: 2,
            interior,
            segments: vec![],
            data: None,
            test,
        }
        .with_segments(segments))
    }

    fn with_segments(mut self, segments: Vec<Segment>) -> Self {
        self.segments = segments;
        self
    }

    /// Navier-Stokes driven by loaded observations. The interior collocation
    /// grid spans the observations' bounding box; the scattered observation
    /// points carry the data term (L2, since they need not form a grid), and
    /// there are no separate boundary segments.
    pub fn ns_dataset(
        table: &NsTable,
        mu_true: f64,
        mu_init: f64,
        n_interior: [usize; 3],
    ) -> Result<Self> {
        let (lo, hi) = table.bounding_box()?;
        let expand = |a: f64, b: f64| if a < b { (a, b) } else { (a - 0.5, a + 0.5) };
        let (x0, x1) = expand(lo[1], hi[1]);
        let (y0, y1) = expand(lo[2], hi[2]);
        let (t0, t1) = expand(lo[0], hi[0]);
        let interior = TensorGrid::new(vec![
            Grid1D::linspace(x0, x1, n_interior[0])?,
            Grid1D::linspace(y0, y1, n_interior[1])?,
            Grid1D::linspace(t0, t1, n_interior[2])?,
        ])?;
        let mut points = Vec::with_capacity(table.rows.len());
        let mut values = vec![Vec::with_capacity(table.rows.len()); 2];
        for row in &table.rows {
            points.push(vec![row[1], row[2], row[0]]);
            values[0].push(row[3]);
            values[1].push(row[4]);
        }
        Ok(Self {
            kind: ProblemKind::Ns,
            model: Model::Ns { synthetic: false },
            theta: ThetaSpec {
                name: "mu",
                truth: mu_true,
                init: mu_init,
            },
            layout: JetLayout::new(3, 2, false)?,
            heads: 2,
            interior: interior.clone(),
            segments: vec![],
            data: Some(DataSet {
                grid: None,
                points,
                values,
            }),
            test: interior,
        })
    }
}

/// Inserts `fixed` at coordinate `fixed_axis` into every point of a
/// lower-dimensional grid, preserving grid-flat order.
fn embed_points(grid: &TensorGrid, fixed_axis: usize, fixed: f64) -> Vec<Vec<f64>> {
    grid.points()
        .into_iter()
        .map(|mut p| {
            p.insert(fixed_axis, fixed);
            p
        })
        .collect()
}

fn check_nonsingular_lambda(lambda: f64) -> Result<()> {
    if (1.0 + lambda).abs() < 1e-12 {
        return Err(Error::SingularSolution {
            reason: "the stiff ODE's closed form divides by 1 + lambda, which is zero".into(),
        });
    }
    Ok(())
}

/// Interior equation residuals at one point, generic over the scalar
/// backend. `theta` is the problem's inverse parameter (true value, a
/// constant node, or a trainable tape parameter).
pub fn point_residuals<S: Scalar>(
    spec: &ProblemSpec,
    fields: &[FieldJet<S>],
    theta: S,
    point: &[f64],
) -> Vec<S> {
    match &spec.model {
        Model::Stiff { .. } => {
            let u = &fields[0];
            vec![(u.d(0) - theta * u.value()).offset(-(-point[0]).exp())]
        }
        Model::Helmholtz => {
            let u = &fields[0];
            let laplace = u.dd(0, 0) + u.dd(1, 1);
            vec![
                (laplace + theta * theta * u.value())
                    .offset(-helmholtz_source(point[0], point[1])),
            ]
        }
        Model::Lqg { .. } => {
            let u = &fields[0];
            let laplace = u.dd(0, 0) + u.dd(1, 1);
            let grad_sq = u.d(0).sq() + u.d(1).sq();
            vec![u.d(2) + laplace - theta * grad_sq]
        }
        Model::Ns { .. } => {
            let psi = &fields[0];
            let om = &fields[1];
            let u_vel = psi.d(1);
            let v_vel = -psi.d(0);
            let momentum =
                om.d(2) + u_vel * om.d(0) + v_vel * om.d(1) - theta * (om.dd(0, 0) + om.dd(1, 1));
            let poisson = om.value() + psi.dd(0, 0) + psi.dd(1, 1);
            vec![momentum, poisson]
        }
    }
}

/// Observable values at one point: the solution value, or the velocity
/// components `(psi_y, -psi_x)` for the two-head problem.
pub fn point_observables<S: Scalar>(spec: &ProblemSpec, fields: &[FieldJet<S>]) -> Vec<S> {
    match &spec.model {
        Model::Ns { .. } => vec![fields[0].d(1), -fields[0].d(0)],
        _ => vec![fields[0].value()],
    }
}

/// Walks the collocation layout and assembles every residual vector.
///
/// In forward mode observation data is skipped; in inverse mode it is
/// required. Residual vectors follow grid-flat order, so RKHS losses can
/// factorize them over the corresponding grids.
pub fn assemble_residuals<S: Scalar>(
    spec: &ProblemSpec,
    source: &mut dyn FieldSource<S>,
    theta: S,
    mode: Mode,
) -> Result<ResidualBatch<S>> {
    let interior = assemble_interior(spec, source, theta)?;
    let boundary = assemble_boundary(spec, source)?;
    let data = assemble_data(spec, source, mode)?;
    Ok(ResidualBatch {
        interior,
        boundary,
        data,
    })
}

/// The interior-equation half of [`assemble_residuals`]: one residual vector
/// per equation over the interior grid. This is the only part that needs the
/// problem's full jet layout (second derivatives and the coefficient).
pub(crate) fn assemble_interior<S: Scalar>(
    spec: &ProblemSpec,
    source: &mut dyn FieldSource<S>,
    theta: S,
) -> Result<Vec<Vec<S>>> {
    let mut point = vec![0.0; spec.input_dim()];
    let mut interior = vec![Vec::with_capacity(spec.interior.n()); spec.equations()];
    for i in 0..spec.interior.n() {
        spec.interior.point(i, &mut point);
        let fields = source.fields(&point)?;
        for (eq, r) in point_residuals(spec, &fields, theta, &point)
            .into_iter()
            .enumerate()
        {
            interior[eq].push(r);
        }
    }
    Ok(interior)
}

/// The boundary half of [`assemble_residuals`]: mismatches against segment
/// targets, per (segment, observable). Boundary residuals read head values
/// (first derivatives at most, for derived observables), so a source over
/// [`ProblemSpec::observable_layout`] suffices.
pub(crate) fn assemble_boundary<S: Scalar>(
    spec: &ProblemSpec,
    source: &mut dyn FieldSource<S>,
) -> Result<Vec<SegmentResiduals<S>>> {
    let mut boundary = Vec::new();
    for (si, seg) in spec.segments.iter().enumerate() {
        let n_obs = seg.targets.len();
        let mut per_obs = vec![Vec::with_capacity(seg.points.len()); n_obs];
        for (pi, p) in seg.points.iter().enumerate() {
            let fields = source.fields(p)?;
            let obs = point_observables(spec, &fields);
            for (o, column) in per_obs.iter_mut().enumerate() {
                column.push(obs[o].offset(-seg.targets[o][pi]));
            }
        }
        for (o, values) in per_obs.into_iter().enumerate() {
            boundary.push(SegmentResiduals {
                segment: si,
                observable: o,
                values,
            });
        }
    }
    Ok(boundary)
}

/// The observation half of [`assemble_residuals`]: in inverse mode,
/// observable mismatches against the attached data (empty in forward mode).
/// Synthetic observations live on the collocation grid, so running this
/// through a [`CachedSource`] shared with [`assemble_interior`] makes the
/// data term reuse the interior field evaluations.
pub(crate) fn assemble_data<S: Scalar>(
    spec: &ProblemSpec,
    source: &mut dyn FieldSource<S>,
    mode: Mode,
) -> Result<Vec<DataResiduals<S>>> {
    let mut data = Vec::new();
    if mode == Mode::Inverse {
        let ds = spec.data.as_ref().ok_or(Error::MissingData {
            context: "inverse mode trains against observations; attach data first",
        })?;
        let n_obs = ds.values.len();
        let mut per_obs = vec![Vec::with_capacity(ds.points.len()); n_obs];
        for (pi, p) in ds.points.iter().enumerate() {
            let fields = source.fields(p)?;
            let obs = point_observables(spec, &fields);
            for (o, column) in per_obs.iter_mut().enumerate() {
                column.push(obs[o].offset(-ds.values[o][pi]));
            }
        }
        for (o, values) in per_obs.into_iter().enumerate() {
            data.push(DataResiduals {
                observable: o,
                values,
                tensor: ds.grid.is_some(),
            });
        }
    }
    Ok(data)
}

// ---------------------------------------------------------------------------
// Exact solutions.
// ---------------------------------------------------------------------------

/// Closed-form stiff-ODE solution
/// `(mu + 1/(1+lambda)) e^{lambda t} - e^{-t}/(1+lambda)`, generic over the
/// scalar backend. Precondition: `lambda != -1` (validated by the `f64`
/// wrapper and the problem builder).
pub fn stiff_exact_scalar<S: Scalar>(lambda: f64, mu: f64, t: S) -> S {
    let c = 1.0 / (1.0 + lambda);
    t.scale(lambda).exp().scale(mu + c) - t.scale(-1.0).exp().scale(c)
}

/// Stiff-ODE solution with the singular-parameter check.
pub fn stiff_exact(lambda: f64, mu: f64, t: f64) -> Result<f64> {
    check_nonsingular_lambda(lambda)?;
    Ok(stiff_exact_scalar(lambda, mu, t))
}

/// Manufactured Helmholtz solution `(x + y) sin(pi x) sin(pi y)`.
pub fn helmholtz_exact_scalar<S: Scalar>(x: S, y: S) -> S {
    let sx = x.scale(std::f64::consts::PI).sin();
    let sy = y.scale(std::f64::consts::PI).sin();
    (x + y) * sx * sy
}

/// The Helmholtz source: exactly `Delta u + u` of the manufactured solution,
/// written out so the forward problem can pose `k` near 1 without knowing
/// the solution.
pub fn helmholtz_source(x: f64, y: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let (sx, cx) = (pi * x).sin_cos();
    let (sy, cy) = (pi * y).sin_cos();
    (x + y) * sx * sy - 2.0 * pi * pi * (x + y) * sx * sy + 2.0 * pi * cy * sx + 2.0 * pi * cx * sy
}

/// LQG terminal cost `g(x) = ln((1 + |x|^2)/2)`.
pub fn lqg_terminal_scalar<S: Scalar>(x: &[S]) -> S {
    let norm_sq = S::sum_squares(x);
    norm_sq.offset(1.0).scale(0.5).ln()
}

pub fn lqg_terminal(x: &[f64]) -> f64 {
    lqg_terminal_scalar(x)
}

/// Tensor Gauss-Hermite evaluator for the LQG solution
/// `u(x, t) = -(1/mu) ln E[ e^{-mu g(x - sqrt(2(T-t)) Z)} ]`, `Z` standard
/// normal in 2-D. The Gaussian weight is absorbed into the rule, leaving a
/// weighted sum of `((1 + |x - sigma z|^2)/2)^{-mu}` terms.
///
/// Convergence warning: the integrand has complex poles where
/// `1 + |x - sigma z|^2 = 0`, which sit close to the real axis when the
/// diffusion scale `sigma` is large (small `t`), so the rule converges
/// geometrically but *slowly* — roughly a factor 5 per extra 20 nodes per
/// axis. Around 240 nodes per axis the values are accurate to ~1e-9 and the
/// differentiated solution satisfies the equation to ~1e-7; 40 nodes leave
/// ~4e-4 errors. [`ProblemSpec::lqg`] refuses rules whose refinement still
/// moves the probe values.
#[derive(Debug, Clone)]
pub struct LqgQuad {
    /// `(z1, z2, joint probability weight)` per tensor node.
    pairs: Vec<[f64; 3]>,
    nodes_per_axis: usize,
}

impl LqgQuad {
    pub fn new(nodes_per_axis: usize) -> Result<Self> {
        let rule = GaussHermite::new(nodes_per_axis)?;
        let (pts, wts) = rule.std_normal_rule();
        let mut pairs = Vec::with_capacity(pts.len() * pts.len());
        for (i, &z1) in pts.iter().enumerate() {
            for (j, &z2) in pts.iter().enumerate() {
                pairs.push([z1, z2, wts[i] * wts[j]]);
            }
        }
        Ok(Self {
            pairs,
            nodes_per_axis,
        })
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.nodes_per_axis
    }

    /// The solution value at `(x1, x2, t)`, generic over the scalar backend;
    /// jets of `t` require `t < horizon` (the diffusion scale
    /// `sqrt(2(horizon - t))` is not differentiable at the terminal time).
    pub fn value<S: Scalar>(&self, mu: f64, horizon: f64, x1: S, x2: S, t: S) -> S {
        let sigma = t.scale(-2.0).offset(2.0 * horizon).sqrt();
        let mut terms = Vec::with_capacity(self.pairs.len());
        let mut weights = Vec::with_capacity(self.pairs.len());
        for &[z1, z2, w] in &self.pairs {
            let d1 = x1 - sigma.scale(z1);
            let d2 = x2 - sigma.scale(z2);
            let base = (d1.sq() + d2.sq()).offset(1.0).scale(0.5);
            terms.push(base.abs_pow(-mu));
            weights.push(w);
        }
        S::lin_comb(&terms, &weights).ln().scale(-1.0 / mu)
    }
}

/// Monte-Carlo oracle for the same Gaussian expectation; slow but
/// structurally independent of the quadrature.
pub fn lqg_exact_mc(mu: f64, horizon: f64, x: [f64; 2], t: f64, samples: u64, seed: u64) -> f64 {
    let sigma = (2.0 * (horizon - t)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut acc = 0.0;
    for _ in 0..samples {
        let z1: f64 = normal.sample(&mut rng);
        let z2: f64 = normal.sample(&mut rng);
        let d1 = x[0] - sigma * z1;
        let d2 = x[1] - sigma * z2;
        acc += (0.5 * (1.0 + d1 * d1 + d2 * d2)).powf(-mu);
    }
    -(acc / samples as f64).ln() / mu
}

/// The decaying Taylor-Green vortex: stream function
/// `psi = sin(x) sin(y) e^{-2 mu t}`, with `omega = -(psi_xx + psi_yy) =
/// 2 psi`, `u = psi_y`, `v = -psi_x`. Divergence-free and an exact solution
/// of the vorticity equation for any viscosity `mu`, on any box.
#[derive(Debug, Clone, Copy)]
pub struct TaylorGreen<S> {
    pub psi: S,
    pub omega: S,
    pub u: S,
    pub v: S,
}

pub fn taylor_green<S: Scalar>(mu: f64, x: S, y: S, t: S) -> TaylorGreen<S> {
    let decay = t.scale(-2.0 * mu).exp();
    let psi = x.sin() * y.sin() * decay;
    let omega = psi.scale(2.0);
    let u = x.sin() * y.cos() * decay;
    let v = -(x.cos() * y.sin() * decay);
    TaylorGreen { psi, omega, u, v }
}

// ---------------------------------------------------------------------------
// Observation datasets.
// ---------------------------------------------------------------------------

/// Loaded velocity observations: rows of `(t, x, y, u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NsTable {
    pub rows: Vec<[f64; 5]>,
}

impl NsTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Componentwise `(min, max)` over `(t, x, y)`.
    pub fn bounding_box(&self) -> Result<([f64; 3], [f64; 3])> {
        if self.rows.is_empty() {
            return Err(Error::MissingData {
                context: "bounding box of an empty observation table",
            });
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for row in &self.rows {
            for k in 0..3 {
                lo[k] = lo[k].min(row[k]);
                hi[k] = hi[k].max(row[k]);
            }
        }
        Ok((lo, hi))
    }
}

const NS_HEADER: &str = "t,x,y,u,v";

/// Reads a `t,x,y,u,v` CSV (UTF-8, LF, decimal floats). Errors carry the
/// 1-based line number.
pub fn load_ns_dataset(path: &Path) -> Result<NsTable> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let lines: Vec<&str> = text.split('\n').collect();
    let header = lines[0];
    if header != NS_HEADER {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            line: 1,
            reason: if header.is_empty() {
                "empty file".into()
            } else {
                format!("expected header `{NS_HEADER}`, found `{header}`")
            },
        });
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.iter().enumerate().skip(1) {
        let lineno = idx + 1;
        // A single trailing newline leaves one empty final fragment; any
        // other blank line is a data error caught by the field count.
        if line.is_empty() && idx + 1 == lines.len() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                line: lineno,
                reason: format!("expected 5 comma-separated fields, found {}", fields.len()),
            });
        }
        let mut row = [0.0f64; 5];
        for (k, field) in fields.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|e| Error::Dataset {
                path: path.to_path_buf(),
                line: lineno,
                reason: format!("field {} (`{}`): {}", k + 1, field, e),
            })?;
            if !v.is_finite() {
                return Err(Error::Dataset {
                    path: path.to_path_buf(),
                    line: lineno,
                    reason: format!("field {} is not finite", k + 1),
                });
            }
            row[k] = v;
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            line: 1,
            reason: "no observation rows".into(),
        });
    }
    Ok(NsTable { rows })
}

/// Writes observations in the same CSV schema. Values print in Rust's
/// shortest round-trip decimal form, so a write-then-read cycle reproduces
/// the exact bits.
pub fn write_ns_dataset(path: &Path, table: &NsTable) -> Result<()> {
    let mut out = String::from(NS_HEADER);
    out.push('\n');
    for row in &table.rows {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(Error::io(path))?;
    file.write_all(out.as_bytes()).map_err(Error::io(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::RngExt;

    fn max_abs(values: &[f64]) -> f64 {
        values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn batch_max(batch: &ResidualBatch<f64>) -> f64 {
        let mut m = 0.0f64;
        for eq in &batch.interior {
            m = m.max(max_abs(eq));
        }
        for seg in &batch.boundary {
            m = m.max(max_abs(&seg.values));
        }
        for d in &batch.data {
            m = m.max(max_abs(&d.values));
        }
        m
    }

    /// Replaces a spec's interior grid so residuals can be probed at
    /// arbitrary (sorted) points through the public assembly path.
    fn with_interior(mut spec: ProblemSpec, grid: TensorGrid) -> ProblemSpec {
        spec.interior = grid;
        spec
    }

    fn jittered_axis(a: f64, b: f64, n: usize, rng: &mut impl rand::Rng) -> Grid1D {
        let h = (b - a) / (n + 1) as f64;
        let pts: Vec<f64> = (1..=n)
            .map(|i| a + h * (i as f64 + 0.4 * (rng.random::<f64>() - 0.5)))
            .collect();
        Grid1D::new(pts).unwrap()
    }

    fn desk_stiff() -> ProblemSpec {
        ProblemSpec::stiff(-2.0, 0.0, 2.0, 50, 200).unwrap()
    }

    fn desk_helmholtz() -> ProblemSpec {
        ProblemSpec::helmholtz(1.0, 0.5, [8, 8], 25, [10, 10]).unwrap()
    }

    fn desk_lqg() -> ProblemSpec {
        ProblemSpec::lqg(
            1.0,
            0.5,
            1.0,
            [[-1.0, 1.0], [-1.0, 1.0]],
            [5, 5, 4],
            [6, 6],
            [7, 7, 5],
            240,
        )
        .unwrap()
    }

    fn desk_ns() -> ProblemSpec {
        ProblemSpec::ns_synthetic(
            0.01,
            0.05,
            [1.0, 8.0],
            [-2.0, 2.0],
            1.9,
            [6, 5, 4],
            [4, 4, 3],
            [7, 6, 5],
        )
        .unwrap()
    }

    #[test]
    fn stiff_reference_matches_hand_values() {
        // u(0) = mu by construction.
        assert_relative_eq!(stiff_exact(-2.0, 2.0, 0.0).unwrap(), 2.0, epsilon = 1e-15);
        // At t = 1 with lambda = -2, mu = 2: (2 - 1)e^{-2} + e^{-1}.
        let expected = (-2.0f64).exp() + (-1.0f64).exp();
        assert_relative_eq!(
            stiff_exact(-2.0, 2.0, 1.0).unwrap(),
            expected,
            epsilon = 1e-15
        );
    }

    #[test]
    fn stiff_reference_rejects_the_singular_parameter() {
        assert!(matches!(
            stiff_exact(-1.0, 2.0, 0.5),
            Err(Error::SingularSolution { .. })
        ));
        assert!(matches!(
            ProblemSpec::stiff(-1.0, 0.0, 2.0, 10, 10),
            Err(Error::SingularSolution { .. })
        ));
    }

    #[test]
    fn stiff_residual_of_reference_vanishes_at_random_times() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grid = TensorGrid::from_axis(jittered_axis(0.0, 5.0, 20, &mut rng));
        let spec = with_interior(desk_stiff(), grid);
        let mut src = ExactSource { spec: &spec };
        let batch = assemble_residuals(&spec, &mut src, spec.theta().truth, Mode::Forward).unwrap();
        assert!(batch_max(&batch) <= 1e-10, "max = {}", batch_max(&batch));
    }

    #[test]
    fn helmholtz_reference_is_zero_on_edges_and_one_at_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s: f64 = rng.random::<f64>() * 2.0 - 1.0;
            for (x, y) in [(s, -1.0), (s, 1.0), (-1.0, s), (1.0, s)] {
                assert_abs_diff_eq!(helmholtz_exact_scalar(x, y), 0.0, epsilon = 1e-14);
            }
        }
        assert_relative_eq!(helmholtz_exact_scalar(0.5, 0.5), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn helmholtz_residual_of_reference_vanishes_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid = TensorGrid::new(vec![
            jittered_axis(-1.0, 1.0, 8, &mut rng),
            jittered_axis(-1.0, 1.0, 7, &mut rng),
        ])
        .unwrap();
        let spec = with_interior(desk_helmholtz(), grid);
        let mut src = ExactSource { spec: &spec };
        let batch = assemble_residuals(&spec, &mut src, 1.0, Mode::Forward).unwrap();
        // 56 interior points; the spec's edge segments ride along for free.
        assert!(batch_max(&batch) <= 1e-8, "max = {}", batch_max(&batch));
    }

    #[test]
    fn helmholtz_edges_partition_the_boundary() {
        let spec = desk_helmholtz();
        assert_eq!(spec.segments().len(), 4);
        let mut seen = std::collections::BTreeSet::new();
        let mut corner_hits = 0;
        for seg in spec.segments() {
            assert_eq!(seg.points.len(), 25);
            for p in &seg.points {
                let key = (p[0].to_bits(), p[1].to_bits());
                assert!(seen.insert(key), "duplicate boundary point {p:?}");
                let is_corner = (p[0].abs() == 1.0) && (p[1].abs() == 1.0);
                if is_corner {
                    corner_hits += 1;
                }
                assert!(p[0].abs() == 1.0 || p[1].abs() == 1.0, "not on boundary");
            }
        }
        assert_eq!(seen.len(), 100);
        assert_eq!(corner_hits, 4, "each corner owned by exactly one edge");
    }

    #[test]
    fn lqg_terminal_limit_and_quadrature_oracles_agree() {
        // At the terminal time the expectation collapses to e^{-mu g(x)}.
        let quad = LqgQuad::new(200).unwrap();
        let x = [0.3, -0.7];
        let at_terminal: f64 = quad.value(1.0, 1.0, x[0], x[1], 1.0);
        assert_relative_eq!(at_terminal, lqg_terminal(&x), epsilon = 1e-12);

        // Independent closed form at the origin with mu = 1, t = 0, T = 1:
        // the radial reduction gives E[2/(1 + 2|Z|^2)] = (e^{1/4}/2) E1(1/4)
        // with E1 the exponential integral, so u = -ln of that. E1(1/4) from
        // its alternating series: E1(x) = -gamma - ln x + sum (-x)^k/(-k k!).
        let e1 = {
            let x: f64 = 0.25;
            let mut sum = 0.0f64;
            let mut term = 1.0f64;
            for k in 1..30 {
                term *= -x / k as f64;
                sum -= term / k as f64;
            }
            -0.577_215_664_901_532_9_f64 - x.ln() + sum
        };
        let closed_form = -((0.25f64.exp() / 2.0) * e1).ln();
        let a: f64 = quad.value(1.0, 1.0, 0.0, 0.0, 0.0);
        assert_relative_eq!(a, closed_form, epsilon = 1e-8);

        // Refining the rule no longer moves the value.
        let fine = LqgQuad::new(240).unwrap();
        let b: f64 = fine.value(1.0, 1.0, 0.0, 0.0, 0.0);
        assert_relative_eq!(a, b, epsilon = 1e-8);

        // Monte-Carlo cross-check to the third significant digit (the value
        // is ~0.4, so that is 5e-4 absolute; the estimator's standard error
        // at 1e7 samples is ~1.4e-4).
        let mc = lqg_exact_mc(1.0, 1.0, [0.0, 0.0], 0.0, 10_000_000, 42);
        assert_abs_diff_eq!(a, mc, epsilon = 5e-4);
    }

    #[test]
    fn lqg_residual_of_reference_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = TensorGrid::new(vec![
            jittered_axis(-1.0, 1.0, 5, &mut rng),
            jittered_axis(-1.0, 1.0, 5, &mut rng),
            jittered_axis(0.0, 0.95, 4, &mut rng),
        ])
        .unwrap();
        let spec = with_interior(desk_lqg(), grid);
        let mut src = ExactSource { spec: &spec };
        let batch = assemble_residuals(&spec, &mut src, 1.0, Mode::Forward).unwrap();
        assert!(batch_max(&batch) <= 1e-6, "max = {}", batch_max(&batch));
    }

    #[test]
    fn lqg_reference_satisfies_the_pde_under_finite_differences() {
        // Independent of the jet machinery: second-order central differences
        // of the quadrature values must satisfy u_t + Lap u = mu |grad u|^2.
        let quad = LqgQuad::new(240).unwrap();
        let (mu, horizon) = (1.0, 1.0);
        let u = |x1: f64, x2: f64, t: f64| -> f64 { quad.value(mu, horizon, x1, x2, t) };
        let (x1, x2, t) = (0.37, -0.21, 0.43);
        let h = 1e-4;
        let u0 = u(x1, x2, t);
        let ut = (u(x1, x2, t + h) - u(x1, x2, t - h)) / (2.0 * h);
        let u1 = (u(x1 + h, x2, t) - u(x1 - h, x2, t)) / (2.0 * h);
        let u2 = (u(x1, x2 + h, t) - u(x1, x2 - h, t)) / (2.0 * h);
        let u11 = (u(x1 + h, x2, t) - 2.0 * u0 + u(x1 - h, x2, t)) / (h * h);
        let u22 = (u(x1, x2 + h, t) - 2.0 * u0 + u(x1, x2 - h, t)) / (h * h);
        let residual = ut + u11 + u22 - mu * (u1 * u1 + u2 * u2);
        assert_abs_diff_eq!(residual, 0.0, epsilon = 1e-4);
    }

    #[test]
    fn lqg_construction_rejects_an_unconverged_quadrature() {
        let err = ProblemSpec::lqg(
            1.0,
            0.5,
            1.0,
            [[-1.0, 1.0], [-1.0, 1.0]],
            [4, 4, 3],
            [4, 4],
            [5, 5, 4],
            2,
        )
        .unwrap_err();
        match err {
            Error::QuadratureNotConverged {
                nodes, rel_change, ..
            } => {
                assert_eq!(nodes, 2);
                assert!(rel_change > 1e-8);
            }
            other => panic!("expected quadrature error, got {other}"),
        }
    }

    #[test]
    fn ns_zero_network_has_identically_zero_residuals() {
        let spec = desk_ns();
        let net = MlpConfig::new(3, vec![4], 2).unwrap();
        let params = vec![0.0; net.param_count()];
        let mut src = FrozenNetworkSource {
            net: &net,
            params: &params,
            offset: 0,
            layout: spec.layout(),
        };
        let batch = assemble_residuals(&spec, &mut src, 0.01, Mode::Forward).unwrap();
        for eq in &batch.interior {
            assert!(eq.iter().all(|&r| r == 0.0));
        }
    }

    #[test]
    fn ns_taylor_green_reference_residuals_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let grid = TensorGrid::new(vec![
            jittered_axis(1.0, 8.0, 5, &mut rng),
            jittered_axis(-2.0, 2.0, 5, &mut rng),
            jittered_axis(0.0, 1.9, 4, &mut rng),
        ])
        .unwrap();
        let spec = with_interior(desk_ns(), grid).with_synthetic_data().unwrap();
        let mut src = ExactSource { spec: &spec };
        let batch = assemble_residuals(&spec, &mut src, 0.01, Mode::Inverse).unwrap();
        assert!(!batch.data.is_empty());
        assert!(batch_max(&batch) <= 1e-6, "max = {}", batch_max(&batch));
    }

    #[test]
    fn ns_velocities_match_finite_differences_of_the_stream_function() {
        let net = MlpConfig::new(3, vec![6, 6], 2).unwrap();
        let params = net.init(9);
        let spec = desk_ns();
        let mut src = FrozenNetworkSource {
            net: &net,
            params: &params,
            offset: 0,
            layout: spec.layout(),
        };
        let psi_value = |p: &[f64]| -> f64 {
            let mut out = [0.0; 2];
            net.forward(&params, 0, p, &mut out);
            out[0]
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-5;
        for _ in 0..10 {
            let p = [
                1.0 + 7.0 * rng.random::<f64>(),
                -2.0 + 4.0 * rng.random::<f64>(),
                1.9 * rng.random::<f64>(),
            ];
            let fields = src.fields(&p).unwrap();
            let obs = point_observables(&spec, &fields);
            let fd_u = (psi_value(&[p[0], p[1] + h, p[2]]) - psi_value(&[p[0], p[1] - h, p[2]]))
                / (2.0 * h);
            let fd_v = -(psi_value(&[p[0] + h, p[1], p[2]]) - psi_value(&[p[0] - h, p[1], p[2]]))
                / (2.0 * h);
            assert_relative_eq!(obs[0], fd_u, max_relative = 1e-6);
            assert_relative_eq!(obs[1], fd_v, max_relative = 1e-6);
        }
    }

    #[test]
    fn every_reference_solution_satisfies_its_equation() {
        // One hundred effectively random points per problem, through the
        // public assembly path on jittered grids.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cases: Vec<(ProblemSpec, TensorGrid)> = vec![
            (
                desk_stiff(),
                TensorGrid::from_axis(jittered_axis(0.0, 5.0, 100, &mut rng)),
            ),
            (
                desk_helmholtz(),
                TensorGrid::new(vec![
                    jittered_axis(-1.0, 1.0, 10, &mut rng),
                    jittered_axis(-1.0, 1.0, 10, &mut rng),
                ])
                .unwrap(),
            ),
            (
                desk_lqg(),
                TensorGrid::new(vec![
                    jittered_axis(-1.0, 1.0, 5, &mut rng),
                    jittered_axis(-1.0, 1.0, 5, &mut rng),
                    jittered_axis(0.0, 0.95, 4, &mut rng),
                ])
                .unwrap(),
            ),
            (
                desk_ns(),
                TensorGrid::new(vec![
                    jittered_axis(1.0, 8.0, 5, &mut rng),
                    jittered_axis(-2.0, 2.0, 5, &mut rng),
                    jittered_axis(0.0, 1.9, 4, &mut rng),
                ])
                .unwrap(),
            ),
        ];
        for (base, grid) in cases {
            let kind = base.kind();
            let spec = with_interior(base, grid);
            let mut src = ExactSource { spec: &spec };
            let batch =
                assemble_residuals(&spec, &mut src, spec.theta().truth, Mode::Forward).unwrap();
            let m = batch_max(&batch);
            assert!(m <= 1e-6, "{kind}: max residual {m}");
        }
    }

    #[test]
    fn theta_at_truth_makes_inverse_match_forward() {
        let spec = desk_stiff().with_synthetic_data().unwrap();
        let net = MlpConfig::new(1, vec![5], 1).unwrap();
        let params = net.init(3);
        let run = |mode: Mode| {
            let mut src = FrozenNetworkSource {
                net: &net,
                params: &params,
                offset: 0,
                layout: spec.layout(),
            };
            assemble_residuals(&spec, &mut src, spec.theta().truth, mode).unwrap()
        };
        let fwd = run(Mode::Forward);
        let inv = run(Mode::Inverse);
        assert_eq!(fwd.interior, inv.interior);
        assert_eq!(fwd.boundary.len(), inv.boundary.len());
        for (a, b) in fwd.boundary.iter().zip(&inv.boundary) {
            assert_eq!(a.values, b.values);
        }
        assert!(fwd.data.is_empty());
        assert_eq!(inv.data.len(), 1);
        assert_eq!(inv.data[0].values.len(), spec.interior().n());
        // Observations are exact solution values, so a hypothetical perfect
        // network would zero them; the actual random network does not.
        assert!(inv.data[0].tensor);
    }

    #[test]
    fn inverse_mode_without_observations_is_an_error() {
        let spec = desk_stiff();
        let net = MlpConfig::new(1, vec![4], 1).unwrap();
        let params = net.init(0);
        let mut src = FrozenNetworkSource {
            net: &net,
            params: &params,
            offset: 0,
            layout: spec.layout(),
        };
        assert!(matches!(
            assemble_residuals(&spec, &mut src, -2.0, Mode::Inverse),
            Err(Error::MissingData { .. })
        ));
    }

    #[test]
    fn collocation_shapes_follow_the_layouts() {
        let spec = desk_helmholtz();
        assert_eq!(spec.interior().n(), 64);
        assert_eq!(spec.equations(), 1);
        assert_eq!(spec.observables(), 1);

        let lqg = desk_lqg();
        assert_eq!(lqg.segments().len(), 1);
        assert_eq!(lqg.segments()[0].grid.dim(), 2);
        assert_eq!(lqg.segments()[0].points.len(), 36);
        // Terminal points all sit at the horizon.
        assert!(lqg.segments()[0].points.iter().all(|p| p[2] == 1.0));

        let ns = desk_ns();
        assert_eq!(ns.segments().len(), 5);
        assert_eq!(ns.equations(), 2);
        assert_eq!(ns.observables(), 2);
        let names: Vec<_> = ns.segments().iter().map(|s| s.name).collect();
        assert_eq!(names, ["initial", "x_min", "x_max", "y_min", "y_max"]);
        for seg in ns.segments() {
            assert_eq!(seg.targets.len(), 2);
            assert_eq!(seg.targets[0].len(), seg.points.len());
            assert_eq!(seg.grid.n(), seg.points.len());
        }
    }

    #[test]
    fn network_and_tape_sources_agree() {
        // The residual batch from the tape (training path) must numerically
        // match the frozen-jet batch (evaluation path) value for value.
        let spec = desk_helmholtz();
        let net = MlpConfig::new(2, vec![5], 1).unwrap();
        let params = net.init(4);
        let mut frozen = FrozenNetworkSource {
            net: &net,
            params: &params,
            offset: 0,
            layout: spec.layout(),
        };
        let expected = assemble_residuals(&spec, &mut frozen, 1.0, Mode::Forward).unwrap();

        let tape = Tape::new(spec.layout(), &params);
        let mut live = NetworkSource {
            tape: &tape,
            net: &net,
            offset: 0,
        };
        let theta = tape.constant(1.0);
        let got = assemble_residuals(&spec, &mut live, theta, Mode::Forward).unwrap();
        for (eq, exp) in got.interior.iter().zip(&expected.interior) {
            for (v, e) in eq.iter().zip(exp) {
                assert_relative_eq!(v.value(), *e, epsilon = 1e-12);
            }
        }
        for (seg, exp) in got.boundary.iter().zip(&expected.boundary) {
            for (v, e) in seg.values.iter().zip(&exp.values) {
                assert_relative_eq!(v.value(), *e, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dataset_loader_round_trips_and_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();

        // Round-trip: synthetic sample, write, read, bitwise equality.
        let mut rows = Vec::new();
        for i in 0..7 {
            let (x, y, t) = (1.0 + 0.37 * i as f64, -0.5 + 0.21 * i as f64, 0.1 * i as f64);
            let f = taylor_green(0.01, x, y, t);
            rows.push([t, x, y, f.u, f.v]);
        }
        let table = NsTable { rows };
        let path = dir.path().join("sample.csv");
        write_ns_dataset(&path, &table).unwrap();
        let loaded = load_ns_dataset(&path).unwrap();
        assert_eq!(loaded, table);
        let (lo, hi) = loaded.bounding_box().unwrap();
        assert!(lo[0] <= hi[0] && lo[1] <= hi[1] && lo[2] <= hi[2]);

        // Empty file.
        let empty = dir.path().join("empty.csv");
        fs::write(&empty, "").unwrap();
        assert!(matches!(
            load_ns_dataset(&empty),
            Err(Error::Dataset { line: 1, .. })
        ));

        // Wrong header.
        let badh = dir.path().join("badh.csv");
        fs::write(&badh, "time,x,y,u,v\n0,1,2,3,4\n").unwrap();
        assert!(matches!(
            load_ns_dataset(&badh),
            Err(Error::Dataset { line: 1, .. })
        ));

        // Malformed row: the error names line 3.
        let badrow = dir.path().join("badrow.csv");
        fs::write(&badrow, "t,x,y,u,v\n0,1,2,3,4\n0,1,2,3\n").unwrap();
        match load_ns_dataset(&badrow) {
            Err(Error::Dataset { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected a line-3 error, got {other:?}"),
        }

        // Non-finite value.
        let naneous = dir.path().join("nan.csv");
        fs::write(&naneous, "t,x,y,u,v\n0,1,2,NaN,4\n").unwrap();
        match load_ns_dataset(&naneous) {
            Err(Error::Dataset { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("not finite"));
            }
            other => panic!("expected a non-finite error, got {other:?}"),
        }

        // Dataset-driven problem: scattered points, no reference solution.
        let spec = ProblemSpec::ns_dataset(&table, 0.01, 0.05, [4, 4, 3]).unwrap();
        assert!(!spec.has_reference());
        assert!(spec.exact_observables(&[1.0, 0.0, 0.0]).is_err());
        let ds = spec.data().unwrap();
        assert_eq!(ds.points.len(), 7);
        assert!(ds.grid.is_none());
        // Loader order (t, x, y) maps to domain order (x, y, t).
        assert_eq!(ds.points[1][2], table.rows[1][0]);
        assert_eq!(ds.points[1][0], table.rows[1][1]);
    }

    #[test]
    fn three_row_table_echoes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("three.csv");
        fs::write(&path, "t,x,y,u,v\n0.5,1.25,-0.75,0.125,2.5\n1,2,3,4,5\n0,0,0,0,0\n").unwrap();
        let table = load_ns_dataset(&path).unwrap();
        assert_eq!(table.len(), 3);
        assert_eq!(table.rows[0], [0.5, 1.25, -0.75, 0.125, 2.5]);
        assert_eq!(table.rows[1], [1.0, 2.0, 3.0, 4.0, 5.0]);
    }
}
