//! Kernel inverses on tensor-product grids.
//!
//! On a product grid the kernel matrix of a product kernel is a Kronecker
//! product of the per-axis kernel matrices, `K = K_0 (x) K_1 (x) ...` with
//! the *last* axis varying fastest (C order, matching
//! [`TensorGrid`](crate::kernel::TensorGrid)'s flattening). Its inverse is
//! the Kronecker product of the per-axis inverses, so applying `K^{-1}`
//! reduces to applying each one-dimensional inverse along its own axis —
//! every fiber of axis `k` is solved with axis `k`'s packet factor. Nothing
//! `n x n` is ever formed: the cost is a sum of per-axis banded solves and
//! the extra memory is one fiber buffer.

use crate::kernel::{MaternParams, TensorGrid};
use crate::packet::{InverseOperator, KernelPacketFactor};
use crate::{Error, Result};

/// Per-axis packet factors for a tensor-product kernel matrix.
#[derive(Debug, Clone)]
pub struct TensorFactor {
    axes: Vec<KernelPacketFactor>,
    shape: Vec<usize>,
    n: usize,
}

/// Builds one packet factor per axis. `params` supplies the kernel for each
/// axis in order; failures are tagged with the offending axis.
pub fn build_tensor_factor(params: &[MaternParams], grid: &TensorGrid) -> Result<TensorFactor> {
    if params.len() != grid.dim() {
        return Err(Error::DimensionMismatch {
            context: "one Matern parameter set per grid axis",
            expected: grid.dim(),
            got: params.len(),
        });
    }
    let mut axes = Vec::with_capacity(grid.dim());
    for (k, (&p, g)) in params.iter().zip(grid.axes()).enumerate() {
        let factor = KernelPacketFactor::build(p, g).map_err(|e| Error::Axis {
            axis: k,
            source: Box::new(e),
        })?;
        axes.push(factor);
    }
    Ok(TensorFactor {
        axes,
        shape: grid.shape().to_vec(),
        n: grid.n(),
    })
}

impl TensorFactor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn axis_factors(&self) -> &[KernelPacketFactor] {
        &self.axes
    }

    /// Applies the 1-D factor of `axis` along every fiber of that axis.
    fn apply_axis(&self, axis: usize, y: &mut [f64], fiber: &mut Vec<f64>, scratch: &mut Vec<f64>) {
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let factor = &self.axes[axis];
        fiber.resize(len, 0.0);
        for o in 0..outer {
            let block = o * len * inner;
            for i in 0..inner {
                let base = block + i;
                for t in 0..len {
                    fiber[t] = y[base + t * inner];
                }
                factor.apply_inverse_in_place(fiber, scratch);
                for t in 0..len {
                    y[base + t * inner] = fiber[t];
                }
            }
        }
    }
}

impl InverseOperator for TensorFactor {
    fn len(&self) -> usize {
        self.n
    }

    fn apply_inverse_in_place(&self, y: &mut [f64], scratch: &mut Vec<f64>) {
        assert_eq!(y.len(), self.n, "operand length must match the grid");
        // Axis order is fixed (0 first) so results are bit-reproducible; the
        // per-axis solves commute mathematically.
        let mut fiber = Vec::new();
        for axis in 0..self.shape.len() {
            self.apply_axis(axis, y, &mut fiber, scratch);
        }
    }
}

/// `K^{-1} y` over the tensor grid, with an explicit length check.
pub fn tensor_apply_inverse(factor: &TensorFactor, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != factor.n {
        return Err(Error::DimensionMismatch {
            context: "tensor inverse operand",
            expected: factor.n,
            got: y.len(),
        });
    }
    Ok(factor.apply_inverse(y))
}

/// `y^T K^{-1} y` over the tensor grid, with an explicit length check.
pub fn tensor_quadratic_form(factor: &TensorFactor, y: &[f64]) -> Result<f64> {
    if y.len() != factor.n {
        return Err(Error::DimensionMismatch {
            context: "tensor quadratic form operand",
            expected: factor.n,
            got: y.len(),
        });
    }
    Ok(factor.quadratic_form(y))
}
