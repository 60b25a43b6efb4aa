//! Differentiation machinery: forward-mode *jets* and a reverse-mode tape
//! whose node payloads are jets.
//!
//! Training a network against a differential equation needs two kinds of
//! derivatives at once. The residual at a point involves derivatives of the
//! network output with respect to its *inputs* (`u_x`, `u_xx`, `u_t`, ...);
//! the optimizer needs the gradient of the scalar loss with respect to the
//! network *parameters*. This module composes the two the cheap way round:
//!
//! - forward mode carries a truncated second-order Taylor expansion — a
//!   [`Jet`] of value, gradient, and (optionally mixed) Hessian components
//!   in up to three input variables — through every primitive;
//! - reverse mode records each primitive on a [`Tape`] and then runs one
//!   sweep backward, treating *every jet component* as a forward
//!   intermediate. The adjoint of a parameter is exactly `dLoss/dparam`,
//!   even when the loss reads input-derivative components.
//!
//! Parameters are not tape leaves; they live in a side table, and the fused
//! [`Tape::weighted_sum`] op (one node per neuron) both consumes them in the
//! forward sweep and scatters their gradient contributions in the reverse
//! sweep. Aggregations over collocation points (sums of squares, linear
//! combinations with fixed weights, and kernel quadratic forms `y^T K^{-1} y`)
//! are likewise single fused nodes; the quadratic form caches the solved
//! vector `K^{-1} y` from its forward pass and replays it as `2 K^{-1} y`
//! backward, so the kernel factor is applied exactly once per sweep.
//!
//! Everything is deterministic: node order is construction order, reverse
//! order is its exact inverse, and no reductions are reordered. Evaluating
//! the same expression on the same inputs twice produces bitwise-identical
//! values and gradients.
//!
//! The [`Scalar`] trait lets residual code be written once and evaluated
//! three ways: on plain `f64` (frozen evaluation at known values), on [`Jet`]
//! (tapeless forward derivatives of closed-form expressions), or on [`Var`]
//! (tape recording for training).

use std::cell::RefCell;
use std::rc::Rc;

use crate::packet::InverseOperator;
use crate::{Error, Result};

/// Maximum number of jet components: value + 3 gradients + 6 Hessian terms.
pub const MAX_COMPS: usize = 10;

static DIAG_PAIRS: [(usize, usize); 3] = [(0, 0), (1, 1), (2, 2)];
static MIXED_PAIRS: [(usize, usize); 6] = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)];

/// Shape of the derivative data carried through an evaluation: how many
/// input variables, up to which order, and whether mixed second derivatives
/// are tracked or only the diagonal (enough for Laplacians).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JetLayout {
    dim: u8,
    order: u8,
    mixed: bool,
}

/// Names one derivative component of a jet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JetComp {
    Value,
    /// First derivative along the given input axis.
    Grad(usize),
    /// Second derivative along a pair of input axes (order-insensitive).
    Hess(usize, usize),
}

impl JetLayout {
    /// `dim` input variables (1 to 3), derivatives up to `order` (0 to 2),
    /// with mixed second derivatives iff `mixed` (ignored below order 2).
    pub fn new(dim: usize, order: u8, mixed: bool) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::DimensionMismatch {
                context: "jet layouts support 1 to 3 input variables",
                expected: 3,
                got: dim,
            });
        }
        if order > 2 {
            return Err(Error::MissingJetComponent {
                layout: format!("order {order}"),
                comp: "orders above 2".into(),
            });
        }
        Ok(Self {
            dim: dim as u8,
            order,
            mixed: mixed && order == 2,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn order(&self) -> u8 {
        self.order
    }

    pub fn mixed(&self) -> bool {
        self.mixed
    }

    /// Number of active components.
    pub fn n_comps(&self) -> usize {
        let d = self.dim();
        let mut n = 1;
        if self.order >= 1 {
            n += d;
        }
        if self.order == 2 {
            n += if self.mixed { d * (d + 1) / 2 } else { d };
        }
        n
    }

    /// The `(i, j)` axis pairs of the Hessian components, in storage order.
    pub fn hess_pairs(&self) -> &'static [(usize, usize)] {
        if self.order < 2 {
            return &[];
        }
        let d = self.dim();
        if self.mixed {
            &MIXED_PAIRS[..d * (d + 1) / 2]
        } else {
            &DIAG_PAIRS[..d]
        }
    }

    fn hess_start(&self) -> usize {
        1 + self.dim()
    }

    /// Flat component index for `comp`, or an error naming what is missing.
    pub fn comp_index(&self, comp: JetComp) -> Result<usize> {
        let missing = |what: String| Error::MissingJetComponent {
            layout: format!("{self:?}"),
            comp: what,
        };
        match comp {
            JetComp::Value => Ok(0),
            JetComp::Grad(i) => {
                if i >= self.dim() {
                    Err(missing(format!("d/dx{i} (axis out of range)")))
                } else if self.order < 1 {
                    Err(missing(format!("d/dx{i}")))
                } else {
                    Ok(1 + i)
                }
            }
            JetComp::Hess(i, j) => {
                let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
                if hi >= self.dim() {
                    return Err(missing(format!("d2/dx{i} dx{j} (axis out of range)")));
                }
                if self.order < 2 {
                    return Err(missing(format!("d2/dx{i} dx{j}")));
                }
                if self.mixed {
                    Ok(self.hess_start() + hi * (hi + 1) / 2 + lo)
                } else if hi == lo {
                    Ok(self.hess_start() + hi)
                } else {
                    Err(missing(format!("d2/dx{i} dx{j} (layout is diagonal-only)")))
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Component arithmetic shared by Jet (tapeless) and Tape (recorded).
// ---------------------------------------------------------------------------

fn comps_mul(lay: JetLayout, a: &[f64], b: &[f64], out: &mut [f64]) {
    out[0] = a[0] * b[0];
    if lay.order >= 1 {
        for i in 0..lay.dim() {
            out[1 + i] = a[1 + i] * b[0] + a[0] * b[1 + i];
        }
    }
    let h0 = lay.hess_start();
    for (k, &(i, j)) in lay.hess_pairs().iter().enumerate() {
        out[h0 + k] =
            a[h0 + k] * b[0] + a[1 + i] * b[1 + j] + a[1 + j] * b[1 + i] + a[0] * b[h0 + k];
    }
}

/// Forward rule for `f(a)` given `f` and its first two derivatives at `a[0]`.
fn comps_unary(lay: JetLayout, f: [f64; 3], a: &[f64], out: &mut [f64]) {
    out[0] = f[0];
    if lay.order >= 1 {
        for i in 0..lay.dim() {
            out[1 + i] = f[1] * a[1 + i];
        }
    }
    let h0 = lay.hess_start();
    for (k, &(i, j)) in lay.hess_pairs().iter().enumerate() {
        out[h0 + k] = f[2] * a[1 + i] * a[1 + j] + f[1] * a[h0 + k];
    }
}

/// Scalar primitives with closed-form derivative chains.
#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryFn {
    Tanh,
    Exp,
    Ln,
    Sin,
    Cos,
    Sqrt,
    Recip,
    /// `|z|^c`. Non-smooth at 0 for c < 2: derivative components that would
    /// diverge there are taken as 0 (a subgradient choice).
    AbsPow(f64),
}

/// Value and first three derivatives of `f` at `v`. The third derivative
/// feeds the reverse sweep: the adjoint of `v` through a recorded Hessian
/// component involves `f'''`.
fn unary_derivs(f: UnaryFn, v: f64) -> [f64; 4] {
    match f {
        UnaryFn::Tanh => {
            let t = v.tanh();
            let s = 1.0 - t * t;
            [t, s, -2.0 * t * s, -2.0 * s * (1.0 - 3.0 * t * t)]
        }
        UnaryFn::Exp => {
            let e = v.exp();
            [e, e, e, e]
        }
        UnaryFn::Ln => {
            let r = 1.0 / v;
            [v.ln(), r, -r * r, 2.0 * r * r * r]
        }
        UnaryFn::Sin => {
            let (s, c) = v.sin_cos();
            [s, c, -s, -c]
        }
        UnaryFn::Cos => {
            let (s, c) = v.sin_cos();
            [c, -s, -c, s]
        }
        UnaryFn::Sqrt => {
            let s = v.sqrt();
            [s, 0.5 / s, -0.25 / (s * s * s), 0.375 / (s * s * s * s * s)]
        }
        UnaryFn::Recip => {
            let r = 1.0 / v;
            let r2 = r * r;
            [r, -r2, 2.0 * r2 * r, -6.0 * r2 * r2]
        }
        UnaryFn::AbsPow(c) => {
            if v == 0.0 {
                let f0 = if c > 0.0 { 0.0 } else { f64::INFINITY };
                let d1 = if c > 1.0 { 0.0 } else { 0.0 }; // subgradient choice
                return [f0, d1, 0.0, 0.0];
            }
            let a = v.abs();
            let sgn = v.signum();
            let f0 = a.powf(c);
            let f1 = c * sgn * a.powf(c - 1.0);
            let f2 = c * (c - 1.0) * a.powf(c - 2.0);
            let f3 = c * (c - 1.0) * (c - 2.0) * sgn * a.powf(c - 3.0);
            [f0, f1, f2, f3]
        }
    }
}

// ---------------------------------------------------------------------------
// Jet: tapeless forward-mode scalar.
// ---------------------------------------------------------------------------

/// A truncated Taylor expansion: value plus derivative components laid out
/// per a [`JetLayout`]. Supports full scalar arithmetic, so evaluating a
/// closed-form expression on seeded jets yields its exact derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    layout: JetLayout,
    c: [f64; MAX_COMPS],
}

impl Jet {
    pub fn constant(layout: JetLayout, v: f64) -> Self {
        let mut c = [0.0; MAX_COMPS];
        c[0] = v;
        Self { layout, c }
    }

    /// Seeds input variable `axis`: value `v`, first derivative 1 along its
    /// own axis, everything else 0.
    pub fn input(layout: JetLayout, v: f64, axis: usize) -> Result<Self> {
        let mut jet = Self::constant(layout, v);
        if layout.order() >= 1 {
            let idx = layout.comp_index(JetComp::Grad(axis))?;
            jet.c[idx] = 1.0;
        } else if axis >= layout.dim() {
            return Err(Error::DimensionMismatch {
                context: "jet input axis",
                expected: layout.dim(),
                got: axis,
            });
        }
        Ok(jet)
    }

    pub fn layout(&self) -> JetLayout {
        self.layout
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    pub fn comp(&self, comp: JetComp) -> Result<f64> {
        Ok(self.c[self.layout.comp_index(comp)?])
    }

    pub fn grad(&self, axis: usize) -> Result<f64> {
        self.comp(JetComp::Grad(axis))
    }

    pub fn hess(&self, i: usize, j: usize) -> Result<f64> {
        self.comp(JetComp::Hess(i, j))
    }

    pub(crate) fn comps(&self) -> &[f64] {
        &self.c[..self.layout.n_comps()]
    }

    fn zip(self, rhs: Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.layout, rhs.layout);
        let mut out = self;
        for k in 0..self.layout.n_comps() {
            out.c[k] = f(self.c[k], rhs.c[k]);
        }
        out
    }

    fn unary(self, f: UnaryFn) -> Self {
        let d = unary_derivs(f, self.c[0]);
        let mut out = Self::constant(self.layout, 0.0);
        let n = self.layout.n_comps();
        let mut buf = [0.0; MAX_COMPS];
        comps_unary(self.layout, [d[0], d[1], d[2]], &self.c[..n], &mut buf[..n]);
        out.c[..n].copy_from_slice(&buf[..n]);
        out
    }
}

impl std::ops::Add for Jet {
    type Output = Jet;
    fn add(self, rhs: Jet) -> Jet {
        self.zip(rhs, |a, b| a + b)
    }
}

impl std::ops::Sub for Jet {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        self.zip(rhs, |a, b| a - b)
    }
}

impl std::ops::Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        let mut out = self;
        for k in 0..self.layout.n_comps() {
            out.c[k] = -self.c[k];
        }
        out
    }
}

impl std::ops::Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        debug_assert_eq!(self.layout, rhs.layout);
        let n = self.layout.n_comps();
        let mut buf = [0.0; MAX_COMPS];
        comps_mul(self.layout, &self.c[..n], &rhs.c[..n], &mut buf[..n]);
        let mut out = Jet::constant(self.layout, 0.0);
        out.c[..n].copy_from_slice(&buf[..n]);
        out
    }
}

impl std::ops::Div for Jet {
    type Output = Jet;
    fn div(self, rhs: Jet) -> Jet {
        self * rhs.unary(UnaryFn::Recip)
    }
}

/// Evaluates `f` on jets seeded at `x`, returning the jet of the result:
/// the value of `f` together with its derivatives with respect to `x`.
pub fn jet_eval<F>(layout: JetLayout, x: &[f64], f: F) -> Result<Jet>
where
    F: FnOnce(&[Jet]) -> Jet,
{
    if x.len() != layout.dim() {
        return Err(Error::DimensionMismatch {
            context: "jet_eval input point",
            expected: layout.dim(),
            got: x.len(),
        });
    }
    let seeds: Vec<Jet> = x
        .iter()
        .enumerate()
        .map(|(axis, &v)| Jet::input(layout, v, axis))
        .collect::<Result<_>>()?;
    Ok(f(&seeds))
}

// ---------------------------------------------------------------------------
// Tape: recorded forward sweep + reverse sweep for parameter gradients.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(u32),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Neg(u32),
    Scale(u32, f64),
    Offset(u32),
    Unary(UnaryFn, u32),
    Extract(u32, u8),
    WeightedSum {
        args: (u32, u32),
        w_off: u32,
        bias: Option<u32>,
    },
    LinComb {
        args: (u32, u32),
        coeff_off: u32,
    },
    SumSquares {
        args: (u32, u32),
    },
    QuadForm {
        args: (u32, u32),
        cache: u32,
    },
}

#[derive(Debug)]
struct TapeInner {
    layout: JetLayout,
    nc: usize,
    params: Vec<f64>,
    jets: Vec<f64>,
    ops: Vec<Op>,
    ids: Vec<u32>,
    coeffs: Vec<f64>,
    solvers: Vec<Rc<dyn InverseOperator>>,
    caches: Vec<Vec<f64>>,
}

/// Records a scalar expression as it is built and differentiates it with
/// respect to the parameter table in one reverse sweep.
///
/// Construction is eager: every [`Var`] has its jet computed immediately, so
/// values can be read at any time. The same tape must not be shared across
/// threads (and cannot be: it is not `Sync`).
#[derive(Debug)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Handle to one recorded node. Copyable; arithmetic on `Var`s records new
/// nodes on their tape.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: u32,
}

impl Tape {
    pub fn new(layout: JetLayout, params: &[f64]) -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                layout,
                nc: layout.n_comps(),
                params: params.to_vec(),
                jets: Vec::new(),
                ops: Vec::new(),
                ids: Vec::new(),
                coeffs: Vec::new(),
                solvers: Vec::new(),
                caches: Vec::new(),
            }),
        }
    }

    pub fn layout(&self) -> JetLayout {
        self.inner.borrow().layout
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().ops.len()
    }

    pub fn param_count(&self) -> usize {
        self.inner.borrow().params.len()
    }

    fn push(&self, op: Op, jet: &[f64]) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(jet.len(), inner.nc);
        let id = inner.ops.len() as u32;
        inner.ops.push(op);
        inner.jets.extend_from_slice(jet);
        Var { tape: self, id }
    }

    /// A constant: value only, no derivative tracking of any kind.
    pub fn constant(&self, v: f64) -> Var<'_> {
        let nc = self.inner.borrow().nc;
        let mut jet = vec![0.0; nc];
        jet[0] = v;
        self.push(Op::Leaf, &jet)
    }

    /// An input variable seeded along `axis` (derivative 1 with respect to
    /// itself), as in [`Jet::input`].
    pub fn input(&self, axis: usize, v: f64) -> Result<Var<'_>> {
        let layout = self.layout();
        let jet = Jet::input(layout, v, axis)?;
        Ok(self.push(Op::Leaf, jet.comps()))
    }

    /// A leaf with an arbitrary jet payload (used to inject precomputed
    /// derivative data, e.g. from closed-form expressions).
    pub fn jet_leaf(&self, jet: Jet) -> Var<'_> {
        debug_assert_eq!(jet.layout(), self.layout());
        self.push(Op::Leaf, jet.comps())
    }

    /// Parameter `idx` of the parameter table, as a scalar expression. Its
    /// jet is constant (parameters do not vary with the inputs); its adjoint
    /// lands in slot `idx` of the gradient.
    pub fn param(&self, idx: usize) -> Var<'_> {
        let (nc, v) = {
            let inner = self.inner.borrow();
            (inner.nc, inner.params[idx])
        };
        let mut jet = vec![0.0; nc];
        jet[0] = v;
        self.push(Op::Param(idx as u32), &jet)
    }

    fn binary(&self, op: fn(u32, u32) -> Op, a: Var<'_>, b: Var<'_>, f: fn(f64, f64) -> f64) -> Var<'_> {
        debug_assert!(std::ptr::eq(a.tape, self) && std::ptr::eq(b.tape, self));
        let jet: Vec<f64> = {
            let inner = self.inner.borrow();
            let nc = inner.nc;
            let ja = &inner.jets[a.id as usize * nc..(a.id as usize + 1) * nc];
            let jb = &inner.jets[b.id as usize * nc..(b.id as usize + 1) * nc];
            ja.iter().zip(jb).map(|(&x, &y)| f(x, y)).collect()
        };
        self.push(op(a.id, b.id), &jet)
    }

    fn mul_vars(&self, a: Var<'_>, b: Var<'_>) -> Var<'_> {
        let jet: Vec<f64> = {
            let inner = self.inner.borrow();
            let nc = inner.nc;
            let ja = &inner.jets[a.id as usize * nc..(a.id as usize + 1) * nc];
            let jb = &inner.jets[b.id as usize * nc..(b.id as usize + 1) * nc];
            let mut out = vec![0.0; nc];
            comps_mul(inner.layout, ja, jb, &mut out);
            out
        };
        self.push(Op::Mul(a.id, b.id), &jet)
    }

    fn unary_var(&self, f: UnaryFn, a: Var<'_>) -> Var<'_> {
        let jet: Vec<f64> = {
            let inner = self.inner.borrow();
            let nc = inner.nc;
            let ja = &inner.jets[a.id as usize * nc..(a.id as usize + 1) * nc];
            let d = unary_derivs(f, ja[0]);
            let mut out = vec![0.0; nc];
            comps_unary(inner.layout, [d[0], d[1], d[2]], ja, &mut out);
            out
        };
        self.push(Op::Unary(f, a.id), &jet)
    }

    fn scale_var(&self, a: Var<'_>, c: f64) -> Var<'_> {
        let jet: Vec<f64> = {
            let inner = self.inner.borrow();
            let nc = inner.nc;
            inner.jets[a.id as usize * nc..(a.id as usize + 1) * nc]
                .iter()
                .map(|&x| c * x)
                .collect()
        };
        self.push(Op::Scale(a.id, c), &jet)
    }

    fn offset_var(&self, a: Var<'_>, c: f64) -> Var<'_> {
        let jet: Vec<f64> = {
            let inner = self.inner.borrow();
            let nc = inner.nc;
            let mut out = inner.jets[a.id as usize * nc..(a.id as usize + 1) * nc].to_vec();
            out[0] += c;
            out
        };
        self.push(Op::Offset(a.id), &jet)
    }

    /// Pulls one jet component out as a plain scalar expression. The result
    /// carries no input-derivative data of its own (those components are
    /// zero); it exists so that losses can consume `u_x`, `u_xx`, ... as
    /// ordinary values.
    pub fn extract(&self, a: Var<'_>, comp: JetComp) -> Result<Var<'_>> {
        let (idx, jet) = {
            let inner = self.inner.borrow();
            let idx = inner.layout.comp_index(comp)?;
            let nc = inner.nc;
            let mut jet = vec![0.0; nc];
            jet[0] = inner.jets[a.id as usize * nc + idx];
            (idx, jet)
        };
        Ok(self.push(Op::Extract(a.id, idx as u8), &jet))
    }

    fn arg_list(&self, args: &[Var<'_>]) -> (u32, u32) {
        let mut inner = self.inner.borrow_mut();
        let start = inner.ids.len() as u32;
        inner.ids.extend(args.iter().map(|v| v.id));
        (start, args.len() as u32)
    }

    /// Fused affine map: `sum_t params[w_off + t] * args[t] (+ params[bias])`.
    /// One node per neuron; the reverse sweep writes the weight and bias
    /// gradients directly.
    pub fn weighted_sum(&self, args: &[Var<'_>], w_off: usize, bias: Option<usize>) -> Var<'_> {
        assert!(!args.is_empty(), "weighted_sum needs at least one argument");
        let ids = self.arg_list(args);
        let jet: Vec<f64> = {
            let inner = self.inner.borrow();
            let nc = inner.nc;
            let mut out = vec![0.0; nc];
            for (t, v) in args.iter().enumerate() {
                let w = inner.params[w_off + t];
                let j = &inner.jets[v.id as usize * nc..(v.id as usize + 1) * nc];
                for k in 0..nc {
                    out[k] += w * j[k];
                }
            }
            if let Some(b) = bias {
                out[0] += inner.params[b];
            }
            out
        };
        self.push(
            Op::WeightedSum {
                args: ids,
                w_off: w_off as u32,
                bias: bias.map(|b| b as u32),
            },
            &jet,
        )
    }

    /// Fused linear combination with fixed (non-trainable) coefficients:
    /// finite-difference stencils, means, and segment weights.
    pub fn lin_comb(&self, args: &[Var<'_>], coeffs: &[f64]) -> Var<'_> {
        assert_eq!(args.len(), coeffs.len());
        assert!(!args.is_empty(), "lin_comb needs at least one argument");
        let ids = self.arg_list(args);
        let coeff_off = {
            let mut inner = self.inner.borrow_mut();
            let off = inner.coeffs.len() as u32;
            inner.coeffs.extend_from_slice(coeffs);
            off
        };
        let jet: Vec<f64> = {
            let inner = self.inner.borrow();
            let nc = inner.nc;
            let mut out = vec![0.0; nc];
            for (&w, v) in coeffs.iter().zip(args) {
                let j = &inner.jets[v.id as usize * nc..(v.id as usize + 1) * nc];
                for k in 0..nc {
                    out[k] += w * j[k];
                }
            }
            out
        };
        self.push(Op::LinComb { args: ids, coeff_off }, &jet)
    }

    /// Fused `sum_t args[t]^2` over the *values* of the arguments.
    pub fn sum_squares(&self, args: &[Var<'_>]) -> Var<'_> {
        assert!(!args.is_empty(), "sum_squares needs at least one argument");
        let ids = self.arg_list(args);
        let jet: Vec<f64> = {
            let inner = self.inner.borrow();
            let nc = inner.nc;
            let mut out = vec![0.0; nc];
            out[0] = args
                .iter()
                .map(|v| {
                    let y = inner.jets[v.id as usize * nc];
                    y * y
                })
                .sum();
            out
        };
        self.push(Op::SumSquares { args: ids }, &jet)
    }

    /// Fused kernel quadratic form `y^T K^{-1} y` over the argument values,
    /// with `K^{-1}` applied by `solver`. The solve happens once, here; the
    /// reverse sweep reuses the cached `K^{-1} y`.
    pub fn quad_form(&self, args: &[Var<'_>], solver: &Rc<dyn InverseOperator>) -> Var<'_> {
        assert_eq!(args.len(), solver.len(), "operand/operator size mismatch");
        let ids = self.arg_list(args);
        let (cache_idx, jet) = {
            let mut inner = self.inner.borrow_mut();
            let nc = inner.nc;
            let y: Vec<f64> = args.iter().map(|v| inner.jets[v.id as usize * nc]).collect();
            let w = solver.apply_inverse(&y);
            let val: f64 = y.iter().zip(&w).map(|(a, b)| a * b).sum();
            let idx = inner.caches.len() as u32;
            inner.caches.push(w);
            inner.solvers.push(Rc::clone(solver));
            let mut out = vec![0.0; nc];
            out[0] = val;
            (idx, out)
        };
        self.push(Op::QuadForm { args: ids, cache: cache_idx }, &jet)
    }

    /// The recorded jet of `v`.
    pub fn jet_of(&self, v: Var<'_>) -> Jet {
        let inner = self.inner.borrow();
        let nc = inner.nc;
        let mut jet = Jet::constant(inner.layout, 0.0);
        jet.c[..nc].copy_from_slice(&inner.jets[v.id as usize * nc..(v.id as usize + 1) * nc]);
        jet
    }

    /// Reverse sweep from `root`: returns `d root.value / d params`, aligned
    /// with the parameter table passed to [`Tape::new`].
    pub fn backward(&self, root: Var<'_>) -> Vec<f64> {
        debug_assert!(std::ptr::eq(root.tape, self));
        let inner = self.inner.borrow();
        let nc = inner.nc;
        let lay = inner.layout;
        let d = lay.dim();
        let h0 = lay.hess_start();
        let pairs = lay.hess_pairs();
        let n_nodes = root.id as usize + 1;
        let mut adj = vec![0.0; n_nodes * nc];
        adj[root.id as usize * nc] = 1.0;
        let mut grad = vec![0.0; inner.params.len()];

        let jets = &inner.jets;
        for id in (0..n_nodes).rev() {
            let z_off = id * nc;
            // Skip nodes with an all-zero adjoint quickly.
            if adj[z_off..z_off + nc].iter().all(|&v| v == 0.0) {
                continue;
            }
            let zbar: Vec<f64> = adj[z_off..z_off + nc].to_vec();
            match inner.ops[id] {
                Op::Leaf => {}
                Op::Param(p) => grad[p as usize] += zbar[0],
                Op::Add(a, b) => {
                    for k in 0..nc {
                        adj[a as usize * nc + k] += zbar[k];
                        adj[b as usize * nc + k] += zbar[k];
                    }
                }
                Op::Sub(a, b) => {
                    for k in 0..nc {
                        adj[a as usize * nc + k] += zbar[k];
                        adj[b as usize * nc + k] -= zbar[k];
                    }
                }
                Op::Neg(a) => {
                    for k in 0..nc {
                        adj[a as usize * nc + k] -= zbar[k];
                    }
                }
                Op::Scale(a, c) => {
                    for k in 0..nc {
                        adj[a as usize * nc + k] += c * zbar[k];
                    }
                }
                Op::Offset(a) => {
                    for k in 0..nc {
                        adj[a as usize * nc + k] += zbar[k];
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (a as usize, b as usize);
                    let ja = &jets[a * nc..(a + 1) * nc];
                    let jb = &jets[b * nc..(b + 1) * nc];
                    // Transpose of the bilinear forward rule; `a` side:
                    let mut av = zbar[0] * jb[0];
                    let mut bv = zbar[0] * ja[0];
                    for i in 0..d.min(nc.saturating_sub(1)) {
                        if lay.order() >= 1 {
                            av += zbar[1 + i] * jb[1 + i];
                            bv += zbar[1 + i] * ja[1 + i];
                            adj[a * nc + 1 + i] += zbar[1 + i] * jb[0];
                            adj[b * nc + 1 + i] += zbar[1 + i] * ja[0];
                        }
                    }
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let zh = zbar[h0 + k];
                        av += zh * jb[h0 + k];
                        bv += zh * ja[h0 + k];
                        adj[a * nc + 1 + i] += zh * jb[1 + j];
                        adj[a * nc + 1 + j] += zh * jb[1 + i];
                        adj[b * nc + 1 + i] += zh * ja[1 + j];
                        adj[b * nc + 1 + j] += zh * ja[1 + i];
                        adj[a * nc + h0 + k] += zh * jb[0];
                        adj[b * nc + h0 + k] += zh * ja[0];
                    }
                    adj[a * nc] += av;
                    adj[b * nc] += bv;
                }
                Op::Unary(f, a) => {
                    let a = a as usize;
                    let ja = &jets[a * nc..(a + 1) * nc];
                    let der = unary_derivs(f, ja[0]);
                    let (f1, f2, f3) = (der[1], der[2], der[3]);
                    let mut av = zbar[0] * f1;
                    if lay.order() >= 1 {
                        for i in 0..d {
                            av += zbar[1 + i] * f2 * ja[1 + i];
                            adj[a * nc + 1 + i] += zbar[1 + i] * f1;
                        }
                    }
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let zh = zbar[h0 + k];
                        av += zh * (f3 * ja[1 + i] * ja[1 + j] + f2 * ja[h0 + k]);
                        adj[a * nc + 1 + i] += zh * f2 * ja[1 + j];
                        adj[a * nc + 1 + j] += zh * f2 * ja[1 + i];
                        adj[a * nc + h0 + k] += zh * f1;
                    }
                    adj[a * nc] += av;
                }
                Op::Extract(a, idx) => {
                    adj[a as usize * nc + idx as usize] += zbar[0];
                }
                Op::WeightedSum { args, w_off, bias } => {
                    let (start, len) = (args.0 as usize, args.1 as usize);
                    for t in 0..len {
                        let vid = inner.ids[start + t] as usize;
                        let w = inner.params[w_off as usize + t];
                        let jv = &jets[vid * nc..(vid + 1) * nc];
                        let mut dot = 0.0;
                        for k in 0..nc {
                            adj[vid * nc + k] += w * zbar[k];
                            dot += zbar[k] * jv[k];
                        }
                        grad[w_off as usize + t] += dot;
                    }
                    if let Some(b) = bias {
                        grad[b as usize] += zbar[0];
                    }
                }
                Op::LinComb { args, coeff_off } => {
                    let (start, len) = (args.0 as usize, args.1 as usize);
                    for t in 0..len {
                        let vid = inner.ids[start + t] as usize;
                        let w = inner.coeffs[coeff_off as usize + t];
                        for k in 0..nc {
                            adj[vid * nc + k] += w * zbar[k];
                        }
                    }
                }
                Op::SumSquares { args } => {
                    let (start, len) = (args.0 as usize, args.1 as usize);
                    for t in 0..len {
                        let vid = inner.ids[start + t] as usize;
                        adj[vid * nc] += 2.0 * jets[vid * nc] * zbar[0];
                    }
                }
                Op::QuadForm { args, cache } => {
                    let (start, len) = (args.0 as usize, args.1 as usize);
                    let w = &inner.caches[cache as usize];
                    for t in 0..len {
                        let vid = inner.ids[start + t] as usize;
                        adj[vid * nc] += 2.0 * w[t] * zbar[0];
                    }
                }
            }
        }
        grad
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        let inner = self.tape.inner.borrow();
        inner.jets[self.id as usize * inner.nc]
    }

    pub fn jet(self) -> Jet {
        self.tape.jet_of(self)
    }

    pub fn tanh(self) -> Self {
        self.tape.unary_var(UnaryFn::Tanh, self)
    }

    pub fn exp(self) -> Self {
        self.tape.unary_var(UnaryFn::Exp, self)
    }

    pub fn ln(self) -> Self {
        self.tape.unary_var(UnaryFn::Ln, self)
    }

    pub fn sin(self) -> Self {
        self.tape.unary_var(UnaryFn::Sin, self)
    }

    pub fn cos(self) -> Self {
        self.tape.unary_var(UnaryFn::Cos, self)
    }

    pub fn sqrt(self) -> Self {
        self.tape.unary_var(UnaryFn::Sqrt, self)
    }

    pub fn recip(self) -> Self {
        self.tape.unary_var(UnaryFn::Recip, self)
    }

    pub fn abs_pow(self, c: f64) -> Self {
        self.tape.unary_var(UnaryFn::AbsPow(c), self)
    }

    pub fn scale(self, c: f64) -> Self {
        self.tape.scale_var(self, c)
    }

    pub fn offset(self, c: f64) -> Self {
        self.tape.offset_var(self, c)
    }

    /// Shorthand for [`Tape::extract`] of a first derivative.
    pub fn deriv(self, axis: usize) -> Result<Self> {
        self.tape.extract(self, JetComp::Grad(axis))
    }

    /// Shorthand for [`Tape::extract`] of a second derivative.
    pub fn second_deriv(self, i: usize, j: usize) -> Result<Self> {
        self.tape.extract(self, JetComp::Hess(i, j))
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(Op::Add, self, rhs, |a, b| a + b)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(Op::Sub, self, rhs, |a, b| a - b)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.mul_vars(self, rhs)
    }
}

impl<'t> std::ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self * rhs.recip()
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let jet: Vec<f64> = {
            let inner = self.tape.inner.borrow();
            let nc = inner.nc;
            inner.jets[self.id as usize * nc..(self.id as usize + 1) * nc]
                .iter()
                .map(|&x| -x)
                .collect()
        };
        self.tape.push(Op::Neg(self.id), &jet)
    }
}

/// Value and parameter gradient of a recorded scalar expression.
#[derive(Debug, Clone)]
pub struct ParamGradient {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Builds the expression `f` on a fresh tape over `params` and returns its
/// value together with `d value / d params` from one reverse sweep.
pub fn param_grad<F>(layout: JetLayout, params: &[f64], f: F) -> Result<ParamGradient>
where
    F: for<'t> FnOnce(&'t Tape) -> Result<Var<'t>>,
{
    let tape = Tape::new(layout, params);
    let root = f(&tape)?;
    let value = root.value();
    let grad = tape.backward(root);
    Ok(ParamGradient { value, grad })
}

// ---------------------------------------------------------------------------
// Scalar abstraction: the same residual code runs on f64, Jet, and Var.
// ---------------------------------------------------------------------------

/// Scalar expression interface. Residual and loss assembly is written once
/// against this trait and instantiated with:
///
/// - `f64` for frozen evaluation (values already known),
/// - [`Jet`] for closed-form expressions needing input derivatives,
/// - [`Var`] for recording onto a [`Tape`] during training.
pub trait Scalar:
    Copy
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    fn value(self) -> f64;
    fn scale(self, c: f64) -> Self;
    fn offset(self, c: f64) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn recip(self) -> Self;
    fn abs_pow(self, c: f64) -> Self;

    fn sq(self) -> Self {
        self * self
    }

    /// `sum_t coeffs[t] * terms[t]`; non-empty.
    fn lin_comb(terms: &[Self], coeffs: &[f64]) -> Self;

    /// `sum_t terms[t]^2` over values; non-empty.
    fn sum_squares(terms: &[Self]) -> Self;

    /// `y^T K^{-1} y` over the term values; non-empty.
    fn quadratic_form(terms: &[Self], solver: &Rc<dyn InverseOperator>) -> Self;
}

impl Scalar for f64 {
    fn value(self) -> f64 {
        self
    }

    fn scale(self, c: f64) -> Self {
        self * c
    }

    fn offset(self, c: f64) -> Self {
        self + c
    }

    fn tanh(self) -> Self {
        f64::tanh(self)
    }

    fn exp(self) -> Self {
        f64::exp(self)
    }

    fn ln(self) -> Self {
        f64::ln(self)
    }

    fn sin(self) -> Self {
        f64::sin(self)
    }

    fn cos(self) -> Self {
        f64::cos(self)
    }

    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }

    fn recip(self) -> Self {
        1.0 / self
    }

    fn abs_pow(self, c: f64) -> Self {
        unary_derivs(UnaryFn::AbsPow(c), self)[0]
    }

    fn lin_comb(terms: &[Self], coeffs: &[f64]) -> Self {
        assert!(!terms.is_empty());
        terms.iter().zip(coeffs).map(|(t, c)| t * c).sum()
    }

    fn sum_squares(terms: &[Self]) -> Self {
        assert!(!terms.is_empty());
        terms.iter().map(|t| t * t).sum()
    }

    fn quadratic_form(terms: &[Self], solver: &Rc<dyn InverseOperator>) -> Self {
        assert!(!terms.is_empty());
        solver.quadratic_form(terms)
    }
}

impl Scalar for Jet {
    fn value(self) -> f64 {
        Jet::value(&self)
    }

    fn scale(self, c: f64) -> Self {
        let mut out = self;
        for k in 0..self.layout.n_comps() {
            out.c[k] = c * self.c[k];
        }
        out
    }

    fn offset(self, c: f64) -> Self {
        let mut out = self;
        out.c[0] += c;
        out
    }

    fn tanh(self) -> Self {
        self.unary(UnaryFn::Tanh)
    }

    fn exp(self) -> Self {
        self.unary(UnaryFn::Exp)
    }

    fn ln(self) -> Self {
        self.unary(UnaryFn::Ln)
    }

    fn sin(self) -> Self {
        self.unary(UnaryFn::Sin)
    }

    fn cos(self) -> Self {
        self.unary(UnaryFn::Cos)
    }

    fn sqrt(self) -> Self {
        self.unary(UnaryFn::Sqrt)
    }

    fn recip(self) -> Self {
        self.unary(UnaryFn::Recip)
    }

    fn abs_pow(self, c: f64) -> Self {
        self.unary(UnaryFn::AbsPow(c))
    }

    fn lin_comb(terms: &[Self], coeffs: &[f64]) -> Self {
        assert!(!terms.is_empty());
        let mut out = Jet::constant(terms[0].layout, 0.0);
        for (t, &c) in terms.iter().zip(coeffs) {
            out = out + t.scale(c);
        }
        out
    }

    fn sum_squares(terms: &[Self]) -> Self {
        assert!(!terms.is_empty());
        let v = terms.iter().map(|t| t.c[0] * t.c[0]).sum();
        Jet::constant(terms[0].layout, v)
    }

    fn quadratic_form(terms: &[Self], solver: &Rc<dyn InverseOperator>) -> Self {
        assert!(!terms.is_empty());
        let y: Vec<f64> = terms.iter().map(|t| t.c[0]).collect();
        Jet::constant(terms[0].layout, solver.quadratic_form(&y))
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(self) -> f64 {
        Var::value(self)
    }

    fn scale(self, c: f64) -> Self {
        Var::scale(self, c)
    }

    fn offset(self, c: f64) -> Self {
        Var::offset(self, c)
    }

    fn tanh(self) -> Self {
        Var::tanh(self)
    }

    fn exp(self) -> Self {
        Var::exp(self)
    }

    fn ln(self) -> Self {
        Var::ln(self)
    }

    fn sin(self) -> Self {
        Var::sin(self)
    }

    fn cos(self) -> Self {
        Var::cos(self)
    }

    fn sqrt(self) -> Self {
        Var::sqrt(self)
    }

    fn recip(self) -> Self {
        Var::recip(self)
    }

    fn abs_pow(self, c: f64) -> Self {
        Var::abs_pow(self, c)
    }

    fn lin_comb(terms: &[Self], coeffs: &[f64]) -> Self {
        assert!(!terms.is_empty());
        terms[0].tape.lin_comb(terms, coeffs)
    }

    fn sum_squares(terms: &[Self]) -> Self {
        assert!(!terms.is_empty());
        terms[0].tape.sum_squares(terms)
    }

    fn quadratic_form(terms: &[Self], solver: &Rc<dyn InverseOperator>) -> Self {
        assert!(!terms.is_empty());
        terms[0].tape.quad_form(terms, solver)
    }
}
