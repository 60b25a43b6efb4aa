//! Kernel packets: the sparse factorization `K^{-1} = A * phi^{-1}` of a
//! Matern kernel matrix on a sorted 1-D grid.
//!
//! A *kernel packet* is a linear combination `sum_j A_j phi(x, x_j)` of
//! kernel translates at `s = 2 nu + 2` consecutive grid points that vanishes
//! identically outside the window `[x_1, x_s]`. For the half-integer Matern
//! family each tail of the kernel is `exp(-c |x - x_j|)` times a polynomial
//! of degree `p = nu - 1/2`, where `c` is the kernel's decay rate, so a
//! combination kills both tails exactly when
//!
//! ```text
//! sum_j A_j x_j^l exp(delta c x_j) = 0   for l = 0..=p and delta = +-1,
//! ```
//!
//! which is `s - 1` homogeneous conditions on `s` unknowns: a one-dimensional
//! null space, solved here by a small Householder QR. Collecting one packet
//! per grid point (interior windows slide; boundary windows shrink and drop
//! the conditions for the side where the grid ends) gives a banded
//! coefficient matrix `A`, and evaluating the packets at the grid gives a
//! banded `phi` with `K A = phi` by construction. Hence
//! `K^{-1} = A phi^{-1}`, and both factors are banded: applying the inverse
//! costs O(n s^2) instead of the dense O(n^3).
//!
//! Grids smaller than one window (`n < s`) carry no packet structure and
//! fall back to a dense Cholesky factor, flagged on the factor. This keeps
//! tiny boundary grids (a single initial-condition point, say) on the same
//! code path as everything else.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;

use crate::banded::{BandedLu, BandedMatrix};
use crate::kernel::{kernel_matrix, matern_eval, Grid1D, MaternParams};
use crate::{Error, Result};

/// Anything that can apply the inverse of a positive-definite kernel matrix.
///
/// Implemented by the packet factor, the dense Cholesky factor, and the
/// Kronecker-structured tensor factor; loss code and the differentiation
/// tape only ever talk to this interface.
pub trait InverseOperator: std::fmt::Debug + Send + Sync {
    /// Operand length this operator acts on.
    fn len(&self) -> usize;

    /// Overwrites `y` with `K^{-1} y`. `scratch` is reused across calls.
    fn apply_inverse_in_place(&self, y: &mut [f64], scratch: &mut Vec<f64>);

    fn apply_inverse(&self, y: &[f64]) -> Vec<f64> {
        let mut out = y.to_vec();
        let mut scratch = Vec::new();
        self.apply_inverse_in_place(&mut out, &mut scratch);
        out
    }

    /// The RKHS quadratic form `y^T K^{-1} y`: the squared native-space norm
    /// of the kernel interpolant through samples `y`.
    fn quadratic_form(&self, y: &[f64]) -> f64 {
        let ky = self.apply_inverse(y);
        y.iter().zip(&ky).map(|(a, b)| a * b).sum()
    }
}

static FACTOR_BUILDS: AtomicU64 = AtomicU64::new(0);

/// Number of kernel factors (packet or dense) constructed so far in this
/// process. Training builds its factors once before the loop; tests use this
/// counter to pin that down.
pub fn build_count() -> u64 {
    FACTOR_BUILDS.load(Ordering::Relaxed)
}

/// Which tail conditions a packet window imposes.
///
/// Interior windows kill both tails. A window touching the left end of the
/// grid only needs its *right* tail killed (`delta = +1` conditions), since
/// no grid point lies to its left; symmetrically at the right end. One-sided
/// windows keep the system square by extending the polynomial degree instead
/// of adding the other tail's conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketSide {
    Left,
    Interior,
    Right,
}

/// Solves the annihilation conditions on one window and returns the packet
/// coefficients, normalized to unit max-norm with a positive leading entry.
///
/// Interior windows must have exactly `s = 2 nu + 2` points; one-sided
/// windows between `(s+1)/2` and `s-1`.
pub fn packet_coefficients(
    window: &[f64],
    params: MaternParams,
    side: PacketSide,
) -> Result<Vec<f64>> {
    let m = window.len();
    let p = params.poly_degree();
    let s = params.window_len();
    let size_ok = match side {
        PacketSide::Interior => m == s,
        PacketSide::Left | PacketSide::Right => m >= (s + 1) / 2 && m < s,
    };
    if !size_ok {
        return Err(Error::InvalidGrid {
            reason: format!("packet window of {m} points is invalid for nu = {} ({side:?})", params.nu()),
        });
    }
    if window.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid {
            reason: "packet window must be strictly increasing".into(),
        });
    }

    // Center the window so the exponentials stay near 1; the conditions are
    // homogeneous and their row space is unchanged by the shift.
    let mid = 0.5 * (window[0] + window[m - 1]);
    let c = params.decay_rate();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m - 1);
    let mut push_conditions = |delta: f64, degree: usize| {
        for l in 0..=degree {
            let row: Vec<f64> = window
                .iter()
                .map(|&x| {
                    let t = x - mid;
                    t.powi(l as i32) * (delta * c * t).exp()
                })
                .collect();
            rows.push(row);
        }
    };
    match side {
        PacketSide::Interior => {
            push_conditions(1.0, p);
            push_conditions(-1.0, p);
        }
        // One-sided windows: only the unbounded side's tail must vanish, with
        // the polynomial degree raised to m - 2 so the system stays square.
        PacketSide::Left => push_conditions(1.0, m - 2),
        PacketSide::Right => push_conditions(-1.0, m - 2),
    }
    debug_assert_eq!(rows.len(), m - 1);

    let mat = DMatrix::from_fn(m - 1, m, |i, j| rows[i][j]);
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularConditions {
            window_start: 0,
            window_len: m,
        });
    }
    let mut coeffs = null_vector(&mat).ok_or(Error::SingularConditions {
        window_start: 0,
        window_len: m,
    })?;

    // Deterministic normalization: unit max-norm, leading nonzero positive.
    let max = coeffs.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let lead = coeffs
        .iter()
        .find(|v| v.abs() > 1e-12 * max)
        .copied()
        .unwrap_or(1.0);
    let scale = if lead < 0.0 { -max } else { max };
    for v in &mut coeffs {
        *v /= scale;
    }
    Ok(coeffs)
}

/// Null vector of a full-row-rank `k x (k+1)` matrix via Householder QR of
/// its transpose: the last column of the full `Q` spans the orthogonal
/// complement of the row space. Returns `None` when the matrix is
/// numerically rank-deficient (null space not one-dimensional).
fn null_vector(m: &DMatrix<f64>) -> Option<Vec<f64>> {
    let k = m.nrows();
    debug_assert_eq!(m.ncols(), k + 1);
    let mut b = m.transpose(); // (k+1) x k
    let rows = k + 1;
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut r_diag = Vec::with_capacity(k);
    for col in 0..k {
        // Householder vector annihilating b[col+1.., col].
        let norm = (col..rows).map(|i| b[(i, col)] * b[(i, col)]).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        let alpha = if b[(col, col)] >= 0.0 { -norm } else { norm };
        let mut v = vec![0.0; rows - col];
        v[0] = b[(col, col)] - alpha;
        for i in col + 1..rows {
            v[i - col] = b[(i, col)];
        }
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        r_diag.push(alpha.abs());
        if vnorm2 > 0.0 {
            for j in col..k {
                let dot: f64 = (col..rows).map(|i| v[i - col] * b[(i, j)]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in col..rows {
                    b[(i, j)] -= f * v[i - col];
                }
            }
        }
        reflectors.push(v);
    }
    let max_diag = r_diag.iter().fold(0.0f64, |a, &b| a.max(b));
    if r_diag.iter().any(|&d| d <= 1e-11 * max_diag) {
        return None;
    }
    // q = H_0 H_1 ... H_{k-1} e_k, applied right to left.
    let mut q = vec![0.0; rows];
    q[rows - 1] = 1.0;
    for col in (0..k).rev() {
        let v = &reflectors[col];
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let dot: f64 = (col..rows).map(|i| v[i - col] * q[i]).sum();
        let f = 2.0 * dot / vnorm2;
        for i in col..rows {
            q[i] -= f * v[i - col];
        }
    }
    Some(q)
}

/// Dense Cholesky factor of a kernel matrix: the O(n^3) reference solver.
#[derive(Debug, Clone)]
pub struct DenseKernelFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    n: usize,
}

impl DenseKernelFactor {
    pub fn new(params: MaternParams, grid: &Grid1D) -> Result<Self> {
        Self::from_matrix(kernel_matrix(params, grid))
    }

    pub fn from_matrix(k: DMatrix<f64>) -> Result<Self> {
        let n = k.nrows();
        match k.clone().cholesky() {
            Some(chol) => {
                FACTOR_BUILDS.fetch_add(1, Ordering::Relaxed);
                Ok(Self { chol, n })
            }
            None => Err(Error::NotPositiveDefinite {
                n,
                minor: failing_minor(&k),
            }),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

impl InverseOperator for DenseKernelFactor {
    fn len(&self) -> usize {
        self.n
    }

    fn apply_inverse_in_place(&self, y: &mut [f64], _scratch: &mut Vec<f64>) {
        let mut v = nalgebra::DVector::from_column_slice(y);
        self.chol.solve_mut(&mut v);
        y.copy_from_slice(v.as_slice());
    }
}

/// Index of the first non-positive pivot of an (unpivoted) Cholesky sweep;
/// diagnostic detail for `NotPositiveDefinite` errors.
fn failing_minor(k: &DMatrix<f64>) -> usize {
    let n = k.nrows();
    let mut a = k.clone();
    for j in 0..n {
        let mut d = a[(j, j)];
        for t in 0..j {
            d -= a[(j, t)] * a[(j, t)];
        }
        if d <= 0.0 {
            return j;
        }
        let d = d.sqrt();
        for i in j + 1..n {
            let mut v = a[(i, j)];
            for t in 0..j {
                v -= a[(i, t)] * a[(j, t)];
            }
            a[(i, j)] = v / d;
        }
        a[(j, j)] = d;
    }
    n
}

/// The sparse inverse factor `K^{-1} = A phi^{-1}` on one grid.
#[derive(Debug, Clone)]
pub struct KernelPacketFactor {
    params: MaternParams,
    grid: Grid1D,
    inner: FactorInner,
}

#[derive(Debug, Clone)]
enum FactorInner {
    Banded {
        /// Packet coefficients; column `j` holds packet `j`'s window.
        coeffs: BandedMatrix,
        /// Packet evaluations `phi_j(x_i)`; zero outside each window by the
        /// compact support of the packets.
        phi: BandedMatrix,
        lu: BandedLu,
    },
    /// Grids with fewer points than one packet window.
    Dense(DenseKernelFactor),
}

impl KernelPacketFactor {
    /// Builds the factor for `grid`. Grids with `n >= s` get the banded
    /// packet construction; smaller grids fall back to dense Cholesky
    /// (visible via [`Self::is_dense_fallback`]).
    pub fn build(params: MaternParams, grid: &Grid1D) -> Result<Self> {
        let n = grid.len();
        let s = params.window_len();
        if n < s {
            let dense = DenseKernelFactor::new(params, grid)?;
            return Ok(Self {
                params,
                grid: grid.clone(),
                inner: FactorInner::Dense(dense),
            });
        }
        let coeffs = packet_coefficient_matrix(params, grid)?;
        Self::from_coefficients(params, grid, coeffs)
    }

    /// Assembles `phi` from a given coefficient matrix and factors it.
    /// Exposed separately because any per-column rescaling of the
    /// coefficients must leave `A phi^{-1}` unchanged; tests exercise
    /// exactly that.
    pub fn from_coefficients(
        params: MaternParams,
        grid: &Grid1D,
        coeffs: BandedMatrix,
    ) -> Result<Self> {
        let phi = phi_from_coefficients(params, grid, &coeffs);
        let lu = phi.lu()?;
        FACTOR_BUILDS.fetch_add(1, Ordering::Relaxed);
        Ok(Self {
            params,
            grid: grid.clone(),
            inner: FactorInner::Banded { coeffs, phi, lu },
        })
    }

    pub fn params(&self) -> MaternParams {
        self.params
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.grid.len()
    }

    pub fn is_dense_fallback(&self) -> bool {
        matches!(self.inner, FactorInner::Dense(_))
    }

    /// The banded coefficient matrix `A`, when the packet path is active.
    pub fn coefficients(&self) -> Option<&BandedMatrix> {
        match &self.inner {
            FactorInner::Banded { coeffs, .. } => Some(coeffs),
            FactorInner::Dense(_) => None,
        }
    }

    /// The banded packet-evaluation matrix `phi`, when the packet path is
    /// active.
    pub fn phi(&self) -> Option<&BandedMatrix> {
        match &self.inner {
            FactorInner::Banded { phi, .. } => Some(phi),
            FactorInner::Dense(_) => None,
        }
    }
}

impl InverseOperator for KernelPacketFactor {
    fn len(&self) -> usize {
        self.grid.len()
    }

    fn apply_inverse_in_place(&self, y: &mut [f64], scratch: &mut Vec<f64>) {
        match &self.inner {
            FactorInner::Banded { coeffs, lu, .. } => {
                scratch.clear();
                scratch.extend_from_slice(y);
                lu.solve_in_place(scratch);
                coeffs.matvec(scratch, y);
            }
            FactorInner::Dense(dense) => dense.apply_inverse_in_place(y, scratch),
        }
    }
}

/// `y^T K^{-1} y` by dense Cholesky: the oracle the packet path is verified
/// against, and the dense baseline used in timing comparisons.
pub fn dense_quadratic_form(params: MaternParams, grid: &Grid1D, y: &[f64]) -> Result<f64> {
    let factor = DenseKernelFactor::new(params, grid)?;
    Ok(factor.quadratic_form(y))
}

/// Window layout for packet `j` on an `n`-point grid: `(start, len, side)`.
///
/// The first `p + 1` packets anchor at the left edge with windows growing
/// from `(s+1)/2` to `s - 1` points, interior packets slide a full `s`-point
/// window, and the last `p + 1` mirror the left edge.
fn window_of(n: usize, s: usize, j: usize) -> (usize, usize, PacketSide) {
    let p = (s - 3) / 2;
    if j <= p {
        (0, p + 2 + j, PacketSide::Left)
    } else if j + p + 1 >= n {
        let jr = n - 1 - j;
        (n - (p + 2 + jr), p + 2 + jr, PacketSide::Right)
    } else {
        (j - p - 1, s, PacketSide::Interior)
    }
}

fn packet_coefficient_matrix(params: MaternParams, grid: &Grid1D) -> Result<BandedMatrix> {
    let n = grid.len();
    let s = params.window_len();
    let p = params.poly_degree();
    let x = grid.points();
    let mut a = BandedMatrix::zeros(n, p + 1, p + 1);
    for j in 0..n {
        let (start, len, side) = window_of(n, s, j);
        let coeffs =
            packet_coefficients(&x[start..start + len], params, side).map_err(|e| match e {
                Error::SingularConditions { .. } => Error::SingularConditions {
                    window_start: start,
                    window_len: len,
                },
                other => other,
            })?;
        for (t, &v) in coeffs.iter().enumerate() {
            a.set(start + t, j, v)?;
        }
    }
    Ok(a)
}

/// Evaluates every packet at every grid point inside its support:
/// `phi[i][j] = sum_k A[k][j] * matern(x_i, x_k)`.
///
/// Entries outside the band are exact zeros: each packet vanishes
/// identically beyond its window, including at the window's own endpoints
/// (the packet is continuous and identically zero on the far side).
pub fn phi_from_coefficients(
    params: MaternParams,
    grid: &Grid1D,
    coeffs: &BandedMatrix,
) -> BandedMatrix {
    let n = grid.len();
    let s = params.window_len();
    let p = params.poly_degree();
    let x = grid.points();
    let mut phi = BandedMatrix::zeros(n, p, p);
    for j in 0..n {
        let (start, len, _) = window_of(n, s, j);
        let lo = j.saturating_sub(p);
        let hi = (j + p).min(n - 1);
        for i in lo..=hi {
            let mut acc = 0.0;
            for k in start..start + len {
                acc += coeffs.get(k, j) * matern_eval(params, x[i], x[k]);
            }
            phi.set(i, j, acc).expect("phi band covers packet supports");
        }
    }
    phi
}
