//! Training losses over residual batches.
//!
//! Four families share one evaluation pipeline:
//!
//! * **Plain least squares** (`l2`): mean of squared residuals, pooled per
//!   region (interior / boundary / data). This is the usual collocation loss.
//! * **Kernel-norm via packets** (`rkhs-kp`): squared native-space norms
//!   `y^T K^{-1} y` of the residual vectors, with `K^{-1}` applied through the
//!   sparse kernel-packet factorization — the fast path.
//! * **Kernel-norm via dense Cholesky** (`rkhs-dense`): the same value through
//!   explicitly materialized kernel matrices. This is the audit path; it
//!   refuses to materialize matrices above a configurable size cap.
//! * **Sobolev** (`sobolev`): mean over collocation points of the summed
//!   squares of mixed finite-difference derivatives of the residual field,
//!   one term per multi-index `a` with every component `a_i <= order`.
//!
//! Normalization is intentionally asymmetric: quadratic forms are used raw
//! (no `1/N`), because the kernel norm already integrates scale information,
//! while the least-squares and Sobolev families keep their `1/N` means.
//! The boundary weight `lambda_b` multiplies the boundary term of the
//! kernel-norm and Sobolev families; the plain least-squares loss ignores it.
//! Data-fit terms (inverse problems) are never weighted by `lambda_b`.
//!
//! [`PreparedLoss`] performs every factorization and stencil construction
//! once, up front; evaluating a batch afterwards allocates no new factors,
//! which the training loop relies on (and asserts via
//! [`crate::packet::build_count`]).

use std::rc::Rc;

use crate::autodiff::{param_grad, ParamGradient, Scalar};
use crate::kernel::{kernel_matrix, Grid1D, MaternParams, TensorGrid};
use crate::network::MlpConfig;
use crate::packet::{DenseKernelFactor, InverseOperator};
use crate::residuals::{
    assemble_boundary, assemble_data, assemble_interior, assemble_residuals, CachedSource,
    ExactSource, FrozenNetworkSource, Mode, NetworkSource, ProblemSpec, ResidualBatch,
};
use crate::tensor::build_tensor_factor;
use crate::{Error, Result};

/// Largest kernel matrix the dense audit path will materialize by default.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// Which norm a [`LossKind`] applies to the residual vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossFamily {
    /// Pooled mean of squared residuals.
    L2,
    /// Kernel norm through the sparse packet factorization.
    RkhsKp(MaternParams),
    /// Kernel norm through dense Cholesky factors (audit path).
    RkhsDense(MaternParams),
    /// Mean of squared mixed finite-difference derivatives up to this order
    /// per axis. Order 0 degenerates to the plain least-squares loss and is
    /// kept only as an internal consistency anchor; supported orders are
    /// 0, 1 and 2.
    Sobolev(u8),
}

/// A fully specified training loss: the norm family plus the boundary weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossKind {
    pub family: LossFamily,
    /// Boundary weight; must be finite and non-negative. Default 1.0.
    pub lambda_b: f64,
}

/// Highest Sobolev order accepted by [`LossKind::sobolev`].
pub const MAX_SOBOLEV_ORDER: u8 = 2;

impl LossKind {
    /// Plain least-squares loss.
    pub fn l2() -> Self {
        Self {
            family: LossFamily::L2,
            lambda_b: 1.0,
        }
    }

    /// Kernel-norm loss through the sparse packet factorization.
    pub fn rkhs_kp(nu: f64, ell: f64) -> Result<Self> {
        Ok(Self {
            family: LossFamily::RkhsKp(MaternParams::new(nu, ell)?),
            lambda_b: 1.0,
        })
    }

    /// Kernel-norm loss through dense Cholesky factors.
    pub fn rkhs_dense(nu: f64, ell: f64) -> Result<Self> {
        Ok(Self {
            family: LossFamily::RkhsDense(MaternParams::new(nu, ell)?),
            lambda_b: 1.0,
        })
    }

    /// Sobolev loss of the given order (0, 1 or 2).
    pub fn sobolev(order: u8) -> Result<Self> {
        if order > MAX_SOBOLEV_ORDER {
            return Err(Error::UnsupportedSobolevOrder { order });
        }
        Ok(Self {
            family: LossFamily::Sobolev(order),
            lambda_b: 1.0,
        })
    }

    /// Replaces the boundary weight; it must be finite and non-negative.
    pub fn with_lambda_b(mut self, lambda_b: f64) -> Result<Self> {
        if !lambda_b.is_finite() || lambda_b < 0.0 {
            return Err(Error::Config {
                path: "lambda_b".into(),
                reason: format!("boundary weight must be finite and >= 0, got {lambda_b}"),
            });
        }
        self.lambda_b = lambda_b;
        Ok(self)
    }

    /// Parses a loss tag: `l2`, `rkhs-kp:<nu>`, `rkhs-dense:<nu>` or
    /// `sobolev:<order>`, where `<nu>` is `0.5`/`1.5`/`2.5` (or `1/2`-style
    /// fractions) and `<order>` is a small integer. The kernel length scale
    /// `ell` applies to the kernel-norm variants.
    pub fn parse(tag: &str, ell: f64) -> Result<Self> {
        let bad = |reason: String| Error::Config {
            path: "loss".into(),
            reason,
        };
        let (head, arg) = match tag.split_once(':') {
            Some((h, a)) => (h.trim(), Some(a.trim())),
            None => (tag.trim(), None),
        };
        match (head, arg) {
            ("l2", None) => Ok(Self::l2()),
            ("rkhs-kp", Some(a)) => Self::rkhs_kp(parse_nu(a)?, ell),
            ("rkhs-dense", Some(a)) => Self::rkhs_dense(parse_nu(a)?, ell),
            ("sobolev", Some(a)) => {
                let order: u8 = a
                    .parse()
                    .map_err(|_| bad(format!("bad Sobolev order {a:?} in {tag:?}")))?;
                Self::sobolev(order)
            }
            _ => Err(bad(format!(
                "unknown loss tag {tag:?} (expected l2, rkhs-kp:<nu>, rkhs-dense:<nu> \
                 or sobolev:<order>)"
            ))),
        }
    }

    /// Canonical tag, e.g. `l2`, `rkhs-kp:0.5`, `sobolev:2`.
    pub fn name(&self) -> String {
        match self.family {
            LossFamily::L2 => "l2".into(),
            LossFamily::RkhsKp(p) => format!("rkhs-kp:{}", p.nu()),
            LossFamily::RkhsDense(p) => format!("rkhs-dense:{}", p.nu()),
            LossFamily::Sobolev(m) => format!("sobolev:{m}"),
        }
    }

    /// Smoothness or order column for result tables (empty for `l2`).
    pub fn nu_label(&self) -> String {
        match self.family {
            LossFamily::L2 => String::new(),
            LossFamily::RkhsKp(p) | LossFamily::RkhsDense(p) => format!("{}", p.nu()),
            LossFamily::Sobolev(m) => format!("{m}"),
        }
    }
}

fn parse_nu(text: &str) -> Result<f64> {
    let parsed = match text.split_once('/') {
        Some((num, den)) => {
            let n: f64 = num.trim().parse().ok().ok_or_else(|| bad_nu(text))?;
            let d: f64 = den.trim().parse().ok().ok_or_else(|| bad_nu(text))?;
            n / d
        }
        None => text.parse().ok().ok_or_else(|| bad_nu(text))?,
    };
    Ok(parsed)
}

fn bad_nu(text: &str) -> Error {
    Error::Config {
        path: "loss".into(),
        reason: format!("bad smoothness value {text:?}"),
    }
}

// ---------------------------------------------------------------------------
// Finite-difference stencils for the Sobolev family.
// ---------------------------------------------------------------------------

/// Weights of the `m`-th derivative at `z` from samples at the nodes `x`,
/// computed with Fornberg's recurrence; works on arbitrarily spaced nodes.
fn fd_weights(z: f64, x: &[f64], m: usize) -> Vec<f64> {
    let n = x.len();
    debug_assert!(n > m);
    let mut c = vec![vec![0.0; m + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[m]).collect()
}

/// One derivative order along one grid axis: per output index, the window
/// start and the stencil weights over that window.
#[derive(Debug, Clone)]
struct AxisDeriv {
    rows: Vec<(usize, Vec<f64>)>,
}

impl AxisDeriv {
    /// `None` when the axis has too few points to estimate the derivative.
    fn build(axis: &Grid1D, order: usize) -> Option<Self> {
        let x = axis.points();
        let n = x.len();
        if n < order + 1 {
            return None;
        }
        // order+2 nodes give second-order accuracy for centered windows and
        // keep one-sided edge stencils consistent.
        let width = (order + 2).min(n);
        let rows = (0..n)
            .map(|i| {
                let start = i.saturating_sub((width - 1) / 2).min(n - width);
                let w = fd_weights(x[i], &x[start..start + width], order);
                (start, w)
            })
            .collect();
        Some(Self { rows })
    }
}

/// All stencils needed to evaluate the Sobolev norm of a field sampled on one
/// tensor grid: every mixed multi-index `a` with `a_i <= order`, and the
/// per-axis derivative operators they compose from. Axes too short for a
/// requested order simply drop the multi-indices that need them.
#[derive(Debug, Clone)]
struct StencilPlan {
    shape: Vec<usize>,
    n: usize,
    /// `derivs[axis][k]` applies the `(k+1)`-th derivative along `axis`.
    derivs: Vec<Vec<Option<AxisDeriv>>>,
    /// Multi-indices with at least one nonzero component (the zero index is
    /// handled separately as a plain sum of squares).
    alphas: Vec<Vec<usize>>,
}

impl StencilPlan {
    fn build(grid: &TensorGrid, order: u8) -> Self {
        let order = order as usize;
        let shape = grid.shape().to_vec();
        let derivs = grid
            .axes()
            .iter()
            .map(|axis| (1..=order).map(|k| AxisDeriv::build(axis, k)).collect())
            .collect();
        let mut alphas = Vec::new();
        let mut alpha = vec![0usize; shape.len()];
        loop {
            if alpha.iter().any(|&a| a > 0) {
                alphas.push(alpha.clone());
            }
            // odometer increment over {0..=order}^dim
            let mut axis = 0;
            loop {
                if axis == alpha.len() {
                    return Self {
                        shape,
                        n: grid.n(),
                        derivs,
                        alphas,
                    };
                }
                alpha[axis] += 1;
                if alpha[axis] <= order {
                    break;
                }
                alpha[axis] = 0;
                axis += 1;
            }
        }
    }

    /// Pushes `(sum of squares of D^a field, weight)` for every supported
    /// multi-index `a` (including `a = 0`) onto `out`.
    fn accumulate<S: Scalar>(
        &self,
        values: &[S],
        weight: f64,
        out: &mut Vec<(S, f64)>,
    ) -> Result<()> {
        if values.len() != self.n {
            return Err(Error::DimensionMismatch {
                context: "Sobolev stencil plan",
                expected: self.n,
                got: values.len(),
            });
        }
        out.push((S::sum_squares(values), weight));
        'alpha: for alpha in &self.alphas {
            let mut cur: Vec<S> = values.to_vec();
            for (axis, &a) in alpha.iter().enumerate() {
                if a == 0 {
                    continue;
                }
                match &self.derivs[axis][a - 1] {
                    Some(deriv) => cur = apply_axis_deriv(&self.shape, axis, deriv, &cur),
                    // Axis too short for this order: skip the multi-index.
                    None => continue 'alpha,
                }
            }
            out.push((S::sum_squares(&cur), weight));
        }
        Ok(())
    }
}

/// Applies a 1-D derivative stencil along `axis` of a flat row-major field.
fn apply_axis_deriv<S: Scalar>(
    shape: &[usize],
    axis: usize,
    deriv: &AxisDeriv,
    cur: &[S],
) -> Vec<S> {
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = Vec::with_capacity(cur.len());
    let mut gathered: Vec<S> = Vec::new();
    for o in 0..outer {
        let base = o * len * stride;
        for (start, weights) in &deriv.rows {
            for i in 0..stride {
                gathered.clear();
                gathered.extend(
                    (0..weights.len()).map(|j| cur[base + (start + j) * stride + i]),
                );
                out.push(S::lin_comb(&gathered, weights));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Prepared per-region norms.
// ---------------------------------------------------------------------------

/// How residuals over one region (interior, one boundary segment, or the
/// data set) enter the loss.
enum RegionNorm {
    /// Sum of squares, later scaled by a pooled `1/N`.
    PlainMean,
    /// Raw quadratic form `y^T K^{-1} y`.
    Quadratic(Rc<dyn InverseOperator>),
    /// Sum over mixed derivative stencils, later scaled by a pooled `1/N`.
    Stencil(StencilPlan),
}

impl RegionNorm {
    fn expected_len(&self) -> Option<usize> {
        match self {
            RegionNorm::PlainMean => None,
            RegionNorm::Quadratic(op) => Some(op.len()),
            RegionNorm::Stencil(plan) => Some(plan.n),
        }
    }
}

/// A loss with every kernel factorization and derivative stencil built once,
/// ready to evaluate residual batches repeatedly without further setup work.
pub struct PreparedLoss {
    kind: LossKind,
    interior: RegionNorm,
    boundary: Vec<RegionNorm>,
    data: Option<RegionNorm>,
}

impl PreparedLoss {
    /// Builds all factors for `kind` over the collocation grids of `spec`,
    /// with the default dense-size cap.
    pub fn build(kind: LossKind, spec: &ProblemSpec) -> Result<Self> {
        Self::build_with_cap(kind, spec, DEFAULT_DENSE_CAP)
    }

    /// As [`PreparedLoss::build`], refusing dense kernel matrices above
    /// `dense_cap` rows.
    pub fn build_with_cap(kind: LossKind, spec: &ProblemSpec, dense_cap: usize) -> Result<Self> {
        let norm_for = |grid: &TensorGrid| -> Result<RegionNorm> {
            Ok(match kind.family {
                LossFamily::L2 => RegionNorm::PlainMean,
                LossFamily::RkhsKp(p) => {
                    let params = vec![p; grid.dim()];
                    let factor = build_tensor_factor(&params, grid)?;
                    RegionNorm::Quadratic(Rc::new(factor))
                }
                LossFamily::RkhsDense(p) => {
                    RegionNorm::Quadratic(Rc::new(dense_tensor_factor(p, grid, dense_cap)?))
                }
                LossFamily::Sobolev(m) => RegionNorm::Stencil(StencilPlan::build(grid, m)),
            })
        };
        let interior = norm_for(spec.interior())?;
        let boundary = spec
            .segments()
            .iter()
            .map(|seg| norm_for(&seg.grid))
            .collect::<Result<Vec<_>>>()?;
        let data = match spec.data() {
            None => None,
            Some(set) => Some(match (&kind.family, &set.grid) {
                // Kernel norms need tensor structure; scattered observations
                // and all non-kernel families use a plain mean of squares.
                (LossFamily::RkhsKp(_) | LossFamily::RkhsDense(_), Some(grid)) => norm_for(grid)?,
                _ => RegionNorm::PlainMean,
            }),
        };
        Ok(Self {
            kind,
            interior,
            boundary,
            data,
        })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    /// Evaluates the loss of one residual batch. Generic over the scalar
    /// backend, so the same code path produces plain numbers, jet-propagated
    /// audits and taped gradients.
    pub fn evaluate<S: Scalar>(&self, batch: &ResidualBatch<S>) -> Result<S> {
        let mut terms: Vec<(S, f64)> = Vec::new();
        let lambda_b = match self.kind.family {
            // The plain least-squares loss has no boundary weight.
            LossFamily::L2 => 1.0,
            _ => self.kind.lambda_b,
        };

        // Interior: one residual vector per equation, all over the same grid.
        let n_interior = batch.interior.first().map_or(0, Vec::len);
        for values in &batch.interior {
            self.push_region(&self.interior, values, 1.0, n_interior, &mut terms)?;
        }

        // Boundary: entries are (segment, observable) pairs; pooled means
        // count each segment's points once, not once per observable.
        let mut counted = vec![false; self.boundary.len()];
        let mut n_boundary = 0usize;
        for entry in &batch.boundary {
            if entry.segment >= self.boundary.len() {
                return Err(Error::DimensionMismatch {
                    context: "boundary segment index",
                    expected: self.boundary.len(),
                    got: entry.segment,
                });
            }
            if !counted[entry.segment] {
                counted[entry.segment] = true;
                n_boundary += entry.values.len();
            }
        }
        for entry in &batch.boundary {
            let norm = &self.boundary[entry.segment];
            self.push_region(norm, &entry.values, lambda_b, n_boundary, &mut terms)?;
        }

        // Data fit: unweighted; kernel norms apply only on tensor grids.
        if !batch.data.is_empty() {
            let norm = self.data.as_ref().ok_or(Error::DimensionMismatch {
                context: "data norm",
                expected: 0,
                got: batch.data.len(),
            })?;
            let n_data = batch.data.first().map_or(0, |d| d.values.len());
            for entry in &batch.data {
                if matches!(norm, RegionNorm::Quadratic(_) | RegionNorm::Stencil(_))
                    && !entry.tensor
                {
                    return Err(Error::DimensionMismatch {
                        context: "data norm requires a tensor grid",
                        expected: 1,
                        got: 0,
                    });
                }
                match norm {
                    // Sobolev observations are point values; only the plain
                    // mean applies to the data term.
                    RegionNorm::Stencil(_) | RegionNorm::PlainMean => {
                        self.push_region(&RegionNorm::PlainMean, &entry.values, 1.0, n_data, &mut terms)?;
                    }
                    RegionNorm::Quadratic(_) => {
                        self.push_region(norm, &entry.values, 1.0, n_data, &mut terms)?;
                    }
                }
            }
        }

        if terms.is_empty() {
            return Err(Error::MissingData {
                context: "loss evaluation needs at least one residual sample",
            });
        }
        let (parts, coeffs): (Vec<S>, Vec<f64>) = terms.into_iter().unzip();
        Ok(S::lin_comb(&parts, &coeffs))
    }

    /// Pushes the contribution of one residual vector under one region norm.
    /// `weight` is the boundary weight (1.0 elsewhere); `pool` the pooled
    /// point count for mean-style norms.
    fn push_region<S: Scalar>(
        &self,
        norm: &RegionNorm,
        values: &[S],
        weight: f64,
        pool: usize,
        terms: &mut Vec<(S, f64)>,
    ) -> Result<()> {
        if values.is_empty() {
            return Ok(());
        }
        if let Some(expected) = norm.expected_len() {
            if expected != values.len() {
                return Err(Error::DimensionMismatch {
                    context: "loss region",
                    expected,
                    got: values.len(),
                });
            }
        }
        match norm {
            RegionNorm::PlainMean => {
                terms.push((S::sum_squares(values), weight / pool as f64));
            }
            RegionNorm::Quadratic(op) => {
                terms.push((S::quadratic_form(values, op), weight));
            }
            RegionNorm::Stencil(plan) => {
                plan.accumulate(values, weight / pool as f64, terms)?;
            }
        }
        Ok(())
    }
}

/// Kronecker-product kernel matrix over a tensor grid, Cholesky-factored.
/// Refuses to materialize more than `cap` rows.
fn dense_tensor_factor(
    params: MaternParams,
    grid: &TensorGrid,
    cap: usize,
) -> Result<DenseKernelFactor> {
    if grid.n() > cap {
        return Err(Error::DenseCapExceeded {
            needed: grid.n(),
            cap,
        });
    }
    let mut k = kernel_matrix(params, &grid.axes()[0]);
    for axis in &grid.axes()[1..] {
        k = k.kronecker(&kernel_matrix(params, axis));
    }
    DenseKernelFactor::from_matrix(k)
}

// ---------------------------------------------------------------------------
// Network- and reference-facing entry points.
// ---------------------------------------------------------------------------

/// Length of the flat optimization vector: the network's parameters, plus one
/// trailing slot for the unknown physical coefficient in inverse mode.
pub fn param_len(net: &MlpConfig, mode: Mode) -> usize {
    net.param_count() + usize::from(mode == Mode::Inverse)
}

fn check_params(net: &MlpConfig, params: &[f64], mode: Mode) -> Result<()> {
    let expected = param_len(net, mode);
    if params.len() != expected {
        return Err(Error::DimensionMismatch {
            context: "loss parameter vector",
            expected,
            got: params.len(),
        });
    }
    Ok(())
}

/// Loss of a frozen parameter vector, evaluated through Taylor jets (no
/// tape). In inverse mode the last entry of `params` is the physical
/// coefficient; in forward mode the true coefficient is used.
pub fn loss_value(
    prepared: &PreparedLoss,
    spec: &ProblemSpec,
    net: &MlpConfig,
    params: &[f64],
    mode: Mode,
) -> Result<f64> {
    check_params(net, params, mode)?;
    let theta = match mode {
        Mode::Forward => spec.theta().truth,
        Mode::Inverse => params[net.param_count()],
    };
    let mut frozen = FrozenNetworkSource {
        net,
        params: &params[..net.param_count()],
        offset: 0,
        layout: spec.layout(),
    };
    let mut source = CachedSource::new(&mut frozen);
    let batch = assemble_residuals(spec, &mut source, theta, mode)?;
    prepared.evaluate(&batch)
}

/// Loss and its gradient with respect to the full parameter vector.
/// Parameter layout as in [`loss_value`].
///
/// Two reverse sweeps add up to the full gradient. Interior residuals and
/// data mismatches share one tape at the problem's full jet layout, behind a
/// per-point cache — synthetic observations live on the collocation grid, so
/// the data term reuses the interior network recordings. Boundary terms go
/// on a second tape at the lighter [`ProblemSpec::observable_layout`], where
/// each node carries only the components observables read.
pub fn loss_gradient(
    prepared: &PreparedLoss,
    spec: &ProblemSpec,
    net: &MlpConfig,
    params: &[f64],
    mode: Mode,
) -> Result<ParamGradient> {
    check_params(net, params, mode)?;
    let mut total = param_grad(spec.layout(), params, |tape| {
        let theta = match mode {
            Mode::Forward => tape.constant(spec.theta().truth),
            Mode::Inverse => tape.param(net.param_count()),
        };
        let mut network = NetworkSource {
            tape,
            net,
            offset: 0,
        };
        let mut source = CachedSource::new(&mut network);
        let interior = assemble_interior(spec, &mut source, theta)?;
        let data = assemble_data(spec, &mut source, mode)?;
        prepared.evaluate(&ResidualBatch {
            interior,
            boundary: Vec::new(),
            data,
        })
    })?;

    if spec.segments().iter().any(|s| !s.points.is_empty()) {
        let observed = param_grad(spec.observable_layout(), params, |tape| {
            let mut source = NetworkSource {
                tape,
                net,
                offset: 0,
            };
            let boundary = assemble_boundary(spec, &mut source)?;
            prepared.evaluate(&ResidualBatch {
                interior: Vec::new(),
                boundary,
                data: Vec::new(),
            })
        })?;
        total.value += observed.value;
        for (t, o) in total.grad.iter_mut().zip(&observed.grad) {
            *t += o;
        }
    }
    Ok(total)
}

/// Loss of the problem's exact reference field — the audit path. A correct
/// loss implementation returns (numerically) zero here for well-posed
/// configurations, since the reference solves the equations.
pub fn exact_loss(prepared: &PreparedLoss, spec: &ProblemSpec, mode: Mode) -> Result<f64> {
    let mut exact = ExactSource { spec };
    let mut source = CachedSource::new(&mut exact);
    let batch = assemble_residuals(spec, &mut source, spec.theta().truth, mode)?;
    prepared.evaluate(&batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet;
    use crate::residuals::SegmentResiduals;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn miniature_stiff() -> ProblemSpec {
        ProblemSpec::stiff(-2.0, 0.0, 2.0, 8, 16).unwrap()
    }

    fn miniature_helmholtz() -> ProblemSpec {
        ProblemSpec::helmholtz(1.0, 0.5, [6, 6], 7, [8, 8]).unwrap()
    }

    fn miniature_lqg() -> ProblemSpec {
        ProblemSpec::lqg(
            1.0,
            0.5,
            1.0,
            [[-1.0, 1.0], [-1.0, 1.0]],
            [4, 4, 3],
            [5, 5],
            [5, 5, 3],
            240,
        )
        .unwrap()
    }

    fn miniature_ns() -> ProblemSpec {
        ProblemSpec::ns_synthetic(
            0.01,
            0.05,
            [1.0, 8.0],
            [-2.0, 2.0],
            1.9,
            [5, 4, 3],
            [4, 4, 3],
            [5, 4, 3],
        )
        .unwrap()
    }

    /// Residual batch from a small randomly initialized network.
    fn network_batch(spec: &ProblemSpec, seed: u64) -> ResidualBatch<f64> {
        let net = MlpConfig::new(spec.input_dim(), vec![4], spec.heads()).unwrap();
        let params = net.init(seed);
        let mut source = FrozenNetworkSource {
            net: &net,
            params: &params,
            offset: 0,
            layout: spec.layout(),
        };
        let mode = if spec.data().is_some() {
            Mode::Inverse
        } else {
            Mode::Forward
        };
        assemble_residuals(spec, &mut source, 0.7, mode).unwrap()
    }

    fn plain_batch(interior: Vec<Vec<f64>>, boundary: Vec<Vec<f64>>) -> ResidualBatch<f64> {
        ResidualBatch {
            interior,
            boundary: boundary
                .into_iter()
                .enumerate()
                .map(|(segment, values)| SegmentResiduals {
                    segment,
                    observable: 0,
                    values,
                })
                .collect(),
            data: Vec::new(),
        }
    }

    #[test]
    fn parse_round_trips_and_rejects() {
        let kinds = [
            ("l2", LossKind::l2()),
            ("rkhs-kp:0.5", LossKind::rkhs_kp(0.5, 1.0).unwrap()),
            ("rkhs-kp:1/2", LossKind::rkhs_kp(0.5, 1.0).unwrap()),
            ("rkhs-dense:2.5", LossKind::rkhs_dense(2.5, 1.0).unwrap()),
            ("sobolev:1", LossKind::sobolev(1).unwrap()),
        ];
        for (tag, want) in kinds {
            assert_eq!(LossKind::parse(tag, 1.0).unwrap(), want, "tag {tag}");
        }
        assert_eq!(LossKind::parse("rkhs-kp:1.5", 1.0).unwrap().name(), "rkhs-kp:1.5");
        assert!(matches!(
            LossKind::parse("sobolev:3", 1.0),
            Err(Error::UnsupportedSobolevOrder { order: 3 })
        ));
        assert!(matches!(
            LossKind::parse("rkhs-kp:0.7", 1.0),
            Err(Error::UnsupportedSmoothness { .. })
        ));
        assert!(matches!(LossKind::parse("nonsense", 1.0), Err(Error::Config { .. })));
        assert!(LossKind::l2().with_lambda_b(-1.0).is_err());
        assert!(LossKind::l2().with_lambda_b(f64::NAN).is_err());
    }

    #[test]
    fn l2_means_interior_and_boundary() {
        // Interior residuals (1, 1): mean 1. Boundary residual (2): mean 4.
        let spec = ProblemSpec::stiff(-2.0, 0.0, 2.0, 2, 4).unwrap();
        let prepared = PreparedLoss::build(LossKind::l2(), &spec).unwrap();
        let batch = plain_batch(vec![vec![1.0, 1.0]], vec![vec![2.0]]);
        assert_eq!(prepared.evaluate(&batch).unwrap(), 5.0);

        let zero = plain_batch(vec![vec![0.0, 0.0]], vec![vec![0.0]]);
        assert_eq!(prepared.evaluate(&zero).unwrap(), 0.0);
    }

    #[test]
    fn l2_matches_hand_recomputation_on_random_batch() {
        let spec = miniature_stiff();
        let prepared = PreparedLoss::build(LossKind::l2(), &spec).unwrap();
        let batch = network_batch(&spec, 3);
        let loss = prepared.evaluate(&batch).unwrap();

        let mean_sq = |v: &[f64]| v.iter().map(|r| r * r).sum::<f64>() / v.len() as f64;
        let mut want = mean_sq(&batch.interior[0]);
        let nb: usize = batch.boundary.iter().map(|b| b.values.len()).sum();
        let sq: f64 = batch
            .boundary
            .iter()
            .flat_map(|b| b.values.iter())
            .map(|r| r * r)
            .sum();
        want += sq / nb as f64;
        assert_relative_eq!(loss, want, max_relative = 1e-12);
    }

    #[test]
    fn single_point_quadratic_form_is_y_squared() {
        // One interior point, unit kernel diagonal: y^T K^{-1} y = 9.
        let grid = TensorGrid::from_axis(Grid1D::new(vec![0.3]).unwrap());
        let params = MaternParams::new(0.5, 1.0).unwrap();
        let factor = build_tensor_factor(&[params], &grid).unwrap();
        let prepared = PreparedLoss {
            kind: LossKind::rkhs_kp(0.5, 1.0).unwrap(),
            interior: RegionNorm::Quadratic(Rc::new(factor)),
            boundary: Vec::new(),
            data: None,
        };
        let batch = plain_batch(vec![vec![3.0]], Vec::new());
        assert_abs_diff_eq!(prepared.evaluate(&batch).unwrap(), 9.0, epsilon = 1e-12);
    }

    #[test]
    fn packet_and_dense_kernel_losses_agree_on_every_problem() {
        let specs = [
            miniature_stiff(),
            miniature_stiff().with_synthetic_data().unwrap(),
            miniature_helmholtz(),
            miniature_helmholtz().with_synthetic_data().unwrap(),
            miniature_lqg(),
            miniature_lqg().with_synthetic_data().unwrap(),
            miniature_ns(),
            miniature_ns().with_synthetic_data().unwrap(),
        ];
        for spec in &specs {
            let batch = network_batch(spec, 11);
            for nu in [0.5, 1.5, 2.5] {
                let kp = PreparedLoss::build(LossKind::rkhs_kp(nu, 1.0).unwrap(), spec).unwrap();
                let dense =
                    PreparedLoss::build(LossKind::rkhs_dense(nu, 1.0).unwrap(), spec).unwrap();
                let a = kp.evaluate(&batch).unwrap();
                let b = dense.evaluate(&batch).unwrap();
                assert!(
                    (a - b).abs() <= 1e-6 * (1.0 + b.abs()),
                    "{} nu={nu}: packet {a} vs dense {b}",
                    spec.kind()
                );
                assert!(a >= -1e-9, "{} nu={nu}: negative loss {a}", spec.kind());
            }
        }
    }

    #[test]
    fn dense_cap_is_enforced() {
        let spec = miniature_helmholtz(); // 36 interior points
        let err = PreparedLoss::build_with_cap(LossKind::rkhs_dense(1.5, 1.0).unwrap(), &spec, 16)
            .err()
            .unwrap();
        assert!(matches!(err, Error::DenseCapExceeded { needed: 36, cap: 16 }));
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let prepared =
            PreparedLoss::build(LossKind::rkhs_kp(1.5, 1.0).unwrap(), &miniature_stiff()).unwrap();
        let other = ProblemSpec::stiff(-2.0, 0.0, 2.0, 5, 4).unwrap();
        let batch = network_batch(&other, 1);
        assert!(matches!(
            prepared.evaluate(&batch).unwrap_err(),
            Error::DimensionMismatch { .. }
        ));
    }

    #[test]
    fn fd_weights_recover_classic_stencils() {
        let x = [0.0, 0.5, 1.0];
        let w1 = fd_weights(0.5, &x, 1);
        assert_abs_diff_eq!(w1[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w1[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w1[2], 1.0, epsilon = 1e-12);
        let w2 = fd_weights(0.5, &x, 2);
        assert_abs_diff_eq!(w2[0], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w2[1], -8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w2[2], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn stencils_differentiate_polynomials_exactly() {
        let grid = TensorGrid::from_axis(Grid1D::linspace(0.0, 1.0, 7).unwrap());
        let plan = StencilPlan::build(&grid, 2);
        let values: Vec<f64> = grid.axes()[0].points().iter().map(|x| x * x).collect();
        let deriv = plan.derivs[0][1].as_ref().unwrap();
        let second = apply_axis_deriv(&[7], 0, deriv, &values);
        for v in second {
            assert_abs_diff_eq!(v, 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn sobolev_of_sine_approximates_h1_energy() {
        // mean(sin^2) + mean(cos^2) over [0, 2pi] is 1.
        let axis = Grid1D::linspace(0.0, std::f64::consts::TAU, 201).unwrap();
        let values: Vec<f64> = axis.points().iter().map(|x| x.sin()).collect();
        let grid = TensorGrid::from_axis(axis);
        let prepared = PreparedLoss {
            kind: LossKind::sobolev(1).unwrap(),
            interior: RegionNorm::Stencil(StencilPlan::build(&grid, 1)),
            boundary: Vec::new(),
            data: None,
        };
        let batch = plain_batch(vec![values], Vec::new());
        let loss = prepared.evaluate(&batch).unwrap();
        assert!((loss - 1.0).abs() < 0.02, "H1 energy of sin: {loss}");
    }

    #[test]
    fn sobolev_of_constant_is_its_square() {
        let grid = TensorGrid::new(vec![
            Grid1D::linspace(0.0, 1.0, 5).unwrap(),
            Grid1D::linspace(0.0, 2.0, 4).unwrap(),
        ])
        .unwrap();
        let prepared = PreparedLoss {
            kind: LossKind::sobolev(2).unwrap(),
            interior: RegionNorm::Stencil(StencilPlan::build(&grid, 2)),
            boundary: Vec::new(),
            data: None,
        };
        let batch = plain_batch(vec![vec![3.0; grid.n()]], Vec::new());
        assert_relative_eq!(prepared.evaluate(&batch).unwrap(), 9.0, max_relative = 1e-9);
    }

    #[test]
    fn sobolev_order_zero_reduces_to_l2() {
        for spec in [miniature_stiff(), miniature_ns()] {
            let batch = network_batch(&spec, 7);
            let l2 = PreparedLoss::build(LossKind::l2(), &spec).unwrap();
            let s0 = PreparedLoss::build(LossKind::sobolev(0).unwrap(), &spec).unwrap();
            let a = l2.evaluate(&batch).unwrap();
            let b = s0.evaluate(&batch).unwrap();
            assert_eq!(a, b, "{}", spec.kind());
        }
    }

    #[test]
    fn boundary_weight_enters_affinely() {
        let spec = miniature_helmholtz();
        let batch = network_batch(&spec, 5);
        for base in [
            LossKind::rkhs_kp(1.5, 1.0).unwrap(),
            LossKind::sobolev(1).unwrap(),
        ] {
            let at = |lb: f64| {
                let kind = base.with_lambda_b(lb).unwrap();
                PreparedLoss::build(kind, &spec)
                    .unwrap()
                    .evaluate(&batch)
                    .unwrap()
            };
            let (l0, l1, l2) = (at(0.0), at(1.0), at(2.0));
            let slope = l1 - l0;
            assert!(slope >= -1e-12, "negative boundary slope {slope}");
            assert_abs_diff_eq!(l2 - l1, slope, epsilon = 1e-9 * (1.0 + l2.abs()));
        }
        // The plain least-squares loss ignores the weight entirely.
        let l2_kind = |lb: f64| LossKind::l2().with_lambda_b(lb).unwrap();
        let a = PreparedLoss::build(l2_kind(0.0), &spec)
            .unwrap()
            .evaluate(&batch)
            .unwrap();
        let b = PreparedLoss::build(l2_kind(3.0), &spec)
            .unwrap()
            .evaluate(&batch)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exact_reference_scores_zero_on_every_family() {
        let kinds = [
            LossKind::l2(),
            LossKind::rkhs_kp(0.5, 1.0).unwrap(),
            LossKind::rkhs_kp(1.5, 1.0).unwrap(),
            LossKind::rkhs_kp(2.5, 1.0).unwrap(),
            LossKind::rkhs_dense(1.5, 1.0).unwrap(),
            LossKind::sobolev(1).unwrap(),
            LossKind::sobolev(2).unwrap(),
        ];
        for spec in [miniature_stiff(), miniature_helmholtz()] {
            for kind in kinds {
                let prepared = PreparedLoss::build(kind, &spec).unwrap();
                let loss = exact_loss(&prepared, &spec, Mode::Forward).unwrap();
                assert!(
                    loss.abs() <= 1e-8,
                    "{} {}: exact reference loss {loss}",
                    spec.kind(),
                    kind.name()
                );
            }
        }
    }

    #[test]
    fn exact_data_contributes_nothing_at_true_coefficient() {
        let forward = miniature_stiff();
        let inverse = forward.clone().with_synthetic_data().unwrap();
        for kind in [LossKind::l2(), LossKind::rkhs_kp(1.5, 1.0).unwrap()] {
            let pf = PreparedLoss::build(kind, &forward).unwrap();
            let pi = PreparedLoss::build(kind, &inverse).unwrap();
            let a = exact_loss(&pf, &forward, Mode::Forward).unwrap();
            let b = exact_loss(&pi, &inverse, Mode::Inverse).unwrap();
            assert_eq!(a, b, "{}: data term should vanish exactly", kind.name());
        }
    }

    #[test]
    fn evaluation_builds_no_new_factors() {
        let spec = miniature_helmholtz();
        let prepared =
            PreparedLoss::build(LossKind::rkhs_kp(2.5, 1.0).unwrap(), &spec).unwrap();
        let batch = network_batch(&spec, 2);
        let before = packet::build_count();
        for _ in 0..3 {
            prepared.evaluate(&batch).unwrap();
        }
        assert_eq!(packet::build_count(), before);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = ProblemSpec::stiff(-2.0, 0.0, 2.0, 6, 8).unwrap().with_synthetic_data().unwrap();
        let net = MlpConfig::new(1, vec![4], 1).unwrap();
        let kinds = [
            LossKind::l2(),
            LossKind::rkhs_kp(0.5, 1.0).unwrap(),
            LossKind::rkhs_dense(1.5, 1.0).unwrap(),
            LossKind::sobolev(1).unwrap(),
        ];
        let mut params = net.init(42);
        params.push(0.3); // physical coefficient slot
        for kind in kinds {
            let prepared = PreparedLoss::build(kind, &spec).unwrap();
            let g = loss_gradient(&prepared, &spec, &net, &params, Mode::Inverse).unwrap();
            let v = loss_value(&prepared, &spec, &net, &params, Mode::Inverse).unwrap();
            assert_relative_eq!(g.value, v, max_relative = 1e-12);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for _ in 0..6 {
                let i = rng.random_range(0..params.len());
                let h = 1e-5;
                let mut plus = params.clone();
                plus[i] += h;
                let mut minus = params.clone();
                minus[i] -= h;
                let fd = (loss_value(&prepared, &spec, &net, &plus, Mode::Inverse).unwrap()
                    - loss_value(&prepared, &spec, &net, &minus, Mode::Inverse).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(
                    g.grad[i],
                    fd,
                    epsilon = 1e-4 * (1.0 + fd.abs())
                );
            }
        }
    }

    #[test]
    fn scattered_data_uses_plain_mean() {
        // A handful of scattered observations: kernel-norm losses must fall
        // back to the mean of squares for the data term.
        let table = crate::residuals::NsTable {
            rows: vec![
                [0.1, 2.0, 0.5, 0.3, -0.2],
                [0.4, 3.0, -0.5, 0.1, 0.2],
                [0.7, 5.0, 1.0, -0.3, 0.1],
                [1.0, 6.0, -1.5, 0.2, -0.1],
            ],
        };
        let spec = ProblemSpec::ns_dataset(&table, 0.01, 0.05, [4, 4, 3]).unwrap();
        let batch = network_batch(&spec, 13);
        for kind in [LossKind::l2(), LossKind::rkhs_kp(0.5, 1.0).unwrap()] {
            let prepared = PreparedLoss::build(kind, &spec).unwrap();
            let loss = prepared.evaluate(&batch).unwrap();
            assert!(loss.is_finite() && loss >= 0.0, "{}: {loss}", kind.name());
        }
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative_and_vanish_only_at_zero(
            raw in proptest::collection::vec(-2.0f64..2.0, 3..12),
            zero in any::<bool>(),
        ) {
            let n = raw.len();
            let values: Vec<f64> = if zero { vec![0.0; n] } else { raw };
            let grid = TensorGrid::from_axis(Grid1D::linspace(0.0, 1.0, n).unwrap());
            let params = MaternParams::new(1.5, 1.0).unwrap();
            let norms: Vec<(LossKind, RegionNorm)> = vec![
                (LossKind::l2(), RegionNorm::PlainMean),
                (
                    LossKind::rkhs_kp(1.5, 1.0).unwrap(),
                    RegionNorm::Quadratic(Rc::new(
                        build_tensor_factor(&[params], &grid).unwrap(),
                    )),
                ),
                (
                    LossKind::rkhs_dense(1.5, 1.0).unwrap(),
                    RegionNorm::Quadratic(Rc::new(
                        dense_tensor_factor(params, &grid, DEFAULT_DENSE_CAP).unwrap(),
                    )),
                ),
                (
                    LossKind::sobolev(1).unwrap(),
                    RegionNorm::Stencil(StencilPlan::build(&grid, 1)),
                ),
            ];
            let batch = plain_batch(vec![values.clone()], Vec::new());
            let all_zero = values.iter().all(|&v| v == 0.0);
            for (kind, interior) in norms {
                let prepared = PreparedLoss {
                    kind,
                    interior,
                    boundary: Vec::new(),
                    data: None,
                };
                let loss = prepared.evaluate(&batch).unwrap();
                prop_assert!(loss >= -1e-9, "{}: negative loss {loss}", kind.name());
                if all_zero {
                    prop_assert!(loss.abs() <= 1e-15, "{}: nonzero at zero", kind.name());
                } else {
                    prop_assert!(loss > 0.0, "{}: zero loss on nonzero batch", kind.name());
                }
            }
        }
    }
}
