//! Matern kernels of half-integer smoothness and the point sets they are
//! evaluated on.
//!
//! # Length-scale convention
//!
//! The kernel here is normalized so that `phi(x, x) = 1` and is parametrized
//! as
//!
//! ```text
//! phi(a, b) = exp(-ell * sqrt(2 nu) * |a - b|) * P_nu(2 ell sqrt(2 nu) |a - b|)
//! ```
//!
//! with `P_nu` a fixed polynomial of degree `nu - 1/2`. The length-scale
//! `ell` **multiplies** the distance: larger `ell` means *faster* decay and a
//! rougher-looking interpolant. This is the reciprocal of the more common
//! convention that divides by a length-scale; keep it in mind when porting
//! hyperparameters from other libraries.
//!
//! Only `nu` in {1/2, 3/2, 5/2} is supported. These are the smoothness levels
//! whose kernels are exponential-times-polynomial, which is exactly the
//! structure the packet construction in [`crate::packet`] exploits.

use crate::{Error, Result};
use nalgebra::DMatrix;

/// Smoothness and length-scale of a Matern kernel.
///
/// Construct through [`MaternParams::new`], which validates that `nu` is one
/// of the supported half-integers and `ell` is positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternParams {
    nu: f64,
    ell: f64,
}

impl MaternParams {
    pub fn new(nu: f64, ell: f64) -> Result<Self> {
        // nu must be p + 1/2 for p in {0, 1, 2}.
        let two_nu = 2.0 * nu;
        let ok = two_nu == 1.0 || two_nu == 3.0 || two_nu == 5.0;
        if !ok {
            return Err(Error::UnsupportedSmoothness { nu });
        }
        if !(ell.is_finite() && ell > 0.0) {
            return Err(Error::InvalidLengthScale { ell });
        }
        Ok(Self { nu, ell })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn ell(&self) -> f64 {
        self.ell
    }

    /// Degree of the polynomial factor: `p = nu - 1/2`, in {0, 1, 2}.
    pub fn poly_degree(&self) -> usize {
        (self.nu - 0.5) as usize
    }

    /// Points per interior packet window: `s = 2 nu + 2`, in {3, 5, 7}.
    pub fn window_len(&self) -> usize {
        (2.0 * self.nu + 2.0) as usize
    }

    /// Exponential decay rate of the kernel, `ell * sqrt(2 nu)`.
    ///
    /// The packet annihilation conditions must use exactly this rate: a
    /// combination of kernel translates can only vanish identically on a tail
    /// if the exponentials it is built from are the kernel's own.
    pub fn decay_rate(&self) -> f64 {
        self.ell * (2.0 * self.nu).sqrt()
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Evaluates the Matern kernel at a pair of scalar locations.
///
/// The polynomial factor is the truncated sum
/// `(p! / (2p)!) * sum_{i=0..=p} ((p+i)! / (i! (p-i)!)) * t^{p-i}` with
/// `t = 2 ell sqrt(2 nu) |a-b|`, which evaluates to 1 at `t = 0` for every
/// supported smoothness, so `matern_eval(params, x, x) == 1.0` exactly.
pub fn matern_eval(params: MaternParams, a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    let p = params.poly_degree();
    let rate = params.decay_rate();
    let t = 2.0 * rate * d;
    let mut poly = 0.0;
    for i in 0..=p {
        let coeff = factorial(p + i) / (factorial(i) * factorial(p - i));
        poly += coeff * t.powi((p - i) as i32);
    }
    poly *= factorial(p) / factorial(2 * p);
    (-rate * d).exp() * poly
}

/// A strictly increasing set of 1-D collocation points.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    points: Vec<f64>,
}

impl Grid1D {
    /// Builds a grid from arbitrary points: sorts them and rejects non-finite
    /// values and duplicates.
    pub fn new(mut points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidGrid {
                reason: "empty point set".into(),
            });
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidGrid {
                reason: "non-finite point".into(),
            });
        }
        points.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if points.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidGrid {
                reason: "duplicate points after sorting".into(),
            });
        }
        Ok(Self { points })
    }

    /// `n` equally spaced points with both endpoints included.
    pub fn linspace(a: f64, b: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGrid {
                reason: "linspace with zero points".into(),
            });
        }
        if n == 1 {
            return Self::new(vec![a]);
        }
        let h = (b - a) / (n - 1) as f64;
        Self::new((0..n).map(|i| a + h * i as f64).collect())
    }

    /// `n` equally spaced points strictly inside `(a, b)`: the linspace over
    /// `[a, b]` with `n + 2` points, endpoints dropped. Convenient for
    /// interior collocation when the endpoints belong to boundary segments.
    pub fn linspace_open(a: f64, b: f64, n: usize) -> Result<Self> {
        let full = Self::linspace(a, b, n + 2)?;
        Self::new(full.points[1..=n].to_vec())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A product grid of up to three [`Grid1D`] axes.
///
/// Flattening is lexicographic with the **last axis varying fastest** (the
/// layout of a nested row-major array). Every vector this crate associates
/// with a tensor grid — residuals, solver operands, predictions — uses this
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    axes: Vec<Grid1D>,
}

impl TensorGrid {
    pub fn new(axes: Vec<Grid1D>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 3 {
            return Err(Error::InvalidGrid {
                reason: format!("tensor grids support 1 to 3 axes, got {}", axes.len()),
            });
        }
        Ok(Self { axes })
    }

    pub fn from_axis(axis: Grid1D) -> Self {
        Self { axes: vec![axis] }
    }

    pub fn axes(&self) -> &[Grid1D] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Total number of grid points (product of axis lengths).
    pub fn n(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.len()).collect()
    }

    /// Decomposes a flat index into per-axis indices (last axis fastest).
    pub fn unravel(&self, flat: usize, out: &mut [usize]) {
        debug_assert_eq!(out.len(), self.dim());
        let mut rem = flat;
        for (a, slot) in self.axes.iter().zip(out.iter_mut()).rev() {
            let _ = a;
            *slot = 0; // overwritten below; keeps the zip structure clear
        }
        for axis in (0..self.dim()).rev() {
            let n = self.axes[axis].len();
            out[axis] = rem % n;
            rem /= n;
        }
        debug_assert_eq!(rem, 0, "flat index out of range");
    }

    /// Writes the coordinates of the `flat`-th grid point into `out`.
    pub fn point(&self, flat: usize, out: &mut [f64]) {
        let mut idx = [0usize; 3];
        self.unravel(flat, &mut idx[..self.dim()]);
        for axis in 0..self.dim() {
            out[axis] = self.axes[axis].points()[idx[axis]];
        }
    }

    /// All grid points as rows, in flat order. Convenience for small grids.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        let mut buf = vec![0.0; d];
        (0..self.n())
            .map(|i| {
                self.point(i, &mut buf);
                buf.clone()
            })
            .collect()
    }
}

/// Dense kernel matrix `K[i][j] = phi(x_i, x_j)` over a 1-D grid.
///
/// This is the O(n^2)-storage object the packet factorization avoids; it
/// remains the reference implementation and the dense-solver input.
pub fn kernel_matrix(params: MaternParams, grid: &Grid1D) -> DMatrix<f64> {
    let x = grid.points();
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| matern_eval(params, x[i], x[j]))
}
