//! Neural differential-equation solvers trained under reproducing-kernel
//! Hilbert space (RKHS) norms.
//!
//! The usual physics-informed training objective measures PDE residuals in a
//! discrete L2 norm. This crate instead measures them in the RKHS norm of a
//! Matern kernel: the squared norm of the kernel interpolant of the residual
//! values, `y^T K^{-1} y`, where `K` is the kernel matrix over the collocation
//! points. Solving with `K^{-1}` densely costs O(n^3); on sorted
//! one-dimensional point sets the Matern inverse admits an exact sparse
//! factorization `K^{-1} = A * phi^{-1}` built from *kernel packets* —
//! compactly supported linear combinations of kernel translates — where both
//! `A` and `phi` are banded. Product (tensor) grids extend the factorization
//! dimension-by-dimension through the Kronecker structure of the kernel
//! matrix, so the quadratic form never materializes `K`.
//!
//! The crate is organized in layers:
//!
//! - [`kernel`]: Matern-1/2, -3/2, -5/2 kernels, 1-D grids, tensor grids.
//! - [`banded`]: compact banded storage and banded LU with partial pivoting.
//! - [`packet`]: kernel-packet construction and the sparse inverse factor.
//! - [`tensor`]: Kronecker-structured inverses over tensor grids.
//! - [`autodiff`]: a reverse-mode tape whose scalars carry second-order
//!   Taylor jets, so one sweep yields parameter gradients of losses built
//!   from network values *and* their input derivatives.
//! - [`network`]: small tanh multilayer perceptrons with seeded init.
//! - [`quadrature`]: Gauss-Hermite rules for Gaussian integrals.
//! - [`residuals`]: four benchmark problems (a stiff ODE, a Helmholtz
//!   equation, an HJB equation from LQG control, and vorticity-form
//!   Navier-Stokes) with exact solutions and collocation layouts.
//! - [`losses`]: L2, RKHS (dense and kernel-packet), and Sobolev training
//!   objectives over residual batches.
//! - [`training`]: full-batch Adam loop with traces and divergence checks.
//! - [`report`]: error metrics, timing harnesses, and CSV/JSON emission.
//! - [`config`]: TOML experiment descriptions used by the CLI.

use std::path::PathBuf;

pub mod autodiff;
pub mod banded;
pub mod config;
pub mod kernel;
pub mod losses;
pub mod network;
pub mod packet;
pub mod quadrature;
pub mod report;
pub mod residuals;
pub mod tensor;
pub mod training;

#[cfg(doctest)]
mod book;

/// Crate-wide error type.
///
/// Numerical routines report *why* they failed (which pivot, which window,
/// which field) so that callers can surface actionable diagnostics; the CLI
/// maps these onto its exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Smoothness values other than 1/2, 3/2, 5/2 have no closed-form kernel
    /// here and no packet construction.
    #[error("unsupported Matern smoothness nu = {nu}; expected 1/2, 3/2 or 5/2")]
    UnsupportedSmoothness { nu: f64 },

    /// Length-scales must be positive and finite.
    #[error("invalid Matern length-scale ell = {ell}; must be positive and finite")]
    InvalidLengthScale { ell: f64 },

    /// Grid points must be finite and strictly increasing after sorting.
    #[error("invalid grid: {reason}")]
    InvalidGrid { reason: String },

    /// A packet window's condition matrix was numerically rank-deficient, so
    /// the annihilation system has no well-defined one-dimensional null space.
    #[error("singular packet condition system on window starting at index {window_start} (size {window_len})")]
    SingularConditions { window_start: usize, window_len: usize },

    /// Banded LU hit a zero pivot; the matrix is singular to working precision.
    #[error("banded LU factorization broke down at pivot {index}")]
    SingularFactor { index: usize },

    /// Attempted to store an entry outside a banded matrix's band.
    #[error("entry ({i}, {j}) lies outside the band (lower {lower}, upper {upper})")]
    OutOfBand {
        i: usize,
        j: usize,
        lower: usize,
        upper: usize,
    },

    /// A dense Cholesky factorization failed; the matrix is not numerically
    /// positive definite; `minor` is the order of the first leading
    /// principal minor whose Cholesky pivot is non-positive.
    #[error("matrix of order {n} is not positive definite (pivot {minor} fails)")]
    NotPositiveDefinite { n: usize, minor: usize },

    /// Shape mismatch between an operator and its operand.
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Failure on one axis of a tensor-product construction.
    #[error("axis {axis}: {source}")]
    Axis {
        axis: usize,
        #[source]
        source: Box<Error>,
    },

    /// Requested derivative data the jet layout was not configured to carry.
    #[error("jet layout {layout} does not carry component {comp}")]
    MissingJetComponent { layout: String, comp: String },

    /// Sobolev losses are discretized up to order 2 only.
    #[error("unsupported Sobolev order {order}; supported orders are 1 and 2")]
    UnsupportedSobolevOrder { order: u8 },

    /// A closed-form reference solution does not exist at the requested
    /// parameters (e.g. a pole in its coefficients).
    #[error("reference solution is singular: {reason}")]
    SingularSolution { reason: String },

    /// Increasing the quadrature resolution still moved the result by more
    /// than the tolerance, so the quadrature value cannot be trusted.
    #[error(
        "quadrature not converged: {nodes} vs {nodes_next} nodes per axis \
         changed the value by {rel_change:.3e} (tolerance {tol:.1e})"
    )]
    QuadratureNotConverged {
        nodes: usize,
        nodes_next: usize,
        rel_change: f64,
        tol: f64,
    },

    /// The dense-kernel code path refuses to materialize matrices past a
    /// configured size; use the packet factorization instead.
    #[error("dense kernel path needs a {needed}x{needed} matrix, above the cap of {cap}")]
    DenseCapExceeded { needed: usize, cap: usize },

    /// An operation required observation data that the problem was built
    /// without.
    #[error("no observation data available: {context}")]
    MissingData { context: &'static str },

    /// The training loss stopped being finite.
    #[error("training diverged at iteration {iter} (loss = {loss})")]
    TrainingDiverged { iter: usize, loss: f64 },

    /// An optimizer step received a NaN or infinite gradient component.
    #[error("non-finite gradient component at index {index}")]
    NonFiniteGradient { index: usize },

    /// Relative errors against an identically-zero reference are undefined.
    #[error("relative L2 error undefined: reference values have zero norm")]
    ZeroReferenceNorm,

    /// Experiment configuration errors, with a dotted path to the offending
    /// field.
    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    /// Malformed row in an external dataset.
    #[error("dataset {path}: line {line}: {reason}")]
    Dataset {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Helper for I/O errors that keeps the offending path attached.
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
