//! Compact storage and LU factorization for banded matrices.
//!
//! A square matrix with lower bandwidth `m1` and upper bandwidth `m2` (so
//! `a[i][j] == 0` whenever `j < i - m1` or `j > i + m2`) is stored row by row
//! in `m1 + m2 + 1` slots per row. The packet factors in [`crate::packet`]
//! produce two such matrices per grid; factoring and solving them costs
//! O(n (m1 + m2)^2) instead of the dense O(n^3).
//!
//! The LU routine uses partial pivoting, which is what makes the packet
//! pipeline safe on irregular grids: the `phi` matrix it factors is
//! nonsingular but not always diagonally dominant.

use crate::{Error, Result};
use nalgebra::DMatrix;

/// Row-compact banded matrix.
///
/// Entry `(i, j)` with `i - lower <= j <= i + upper` lives at
/// `data[i * width + (j - i + lower)]`; reads outside the band return zero,
/// writes outside the band are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedMatrix {
    n: usize,
    lower: usize,
    upper: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, lower: usize, upper: usize) -> Self {
        Self {
            n,
            lower,
            upper,
            data: vec![0.0; n * (lower + upper + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lower_bandwidth(&self) -> usize {
        self.lower
    }

    pub fn upper_bandwidth(&self) -> usize {
        self.upper
    }

    fn width(&self) -> usize {
        self.lower + self.upper + 1
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        if i >= self.n || j >= self.n {
            return None;
        }
        if j + self.lower < i || j > i + self.upper {
            return None;
        }
        Some(i * self.width() + (j + self.lower - i))
    }

    /// Returns the entry at `(i, j)`; entries outside the band are zero.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self.slot(i, j) {
            Some(s) => self.data[s],
            None => 0.0,
        }
    }

    /// Sets the entry at `(i, j)`, rejecting positions outside the band.
    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        match self.slot(i, j) {
            Some(s) => {
                self.data[s] = value;
                Ok(())
            }
            None => Err(Error::OutOfBand {
                i,
                j,
                lower: self.lower,
                upper: self.upper,
            }),
        }
    }

    /// Column range `[start, end)` of stored entries in row `i`.
    pub fn row_range(&self, i: usize) -> (usize, usize) {
        let start = i.saturating_sub(self.lower);
        let end = (i + self.upper + 1).min(self.n);
        (start, end)
    }

    /// `y = self * x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        let w = self.width();
        for i in 0..self.n {
            let (start, end) = self.row_range(i);
            let row = &self.data[i * w..(i + 1) * w];
            let mut acc = 0.0;
            for j in start..end {
                acc += row[j + self.lower - i] * x[j];
            }
            y[i] = acc;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// Factorizes the matrix with partial pivoting. Fails with the pivot
    /// index if the matrix is singular to working precision.
    pub fn lu(&self) -> Result<BandedLu> {
        BandedLu::factor(self)
    }
}

/// LU factorization of a [`BandedMatrix`] with partial pivoting.
///
/// Row storage follows the sliding-origin scheme: while column `k` is being
/// eliminated every active row is anchored at column `k`, so pivot swaps are
/// plain row swaps and the factored `U` keeps `m1 + m2 + 1` slots per row
/// (pivoting widens the upper bandwidth by at most `m1`). Multipliers and
/// swap targets are recorded for the forward-substitution pass.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    m1: usize,
    mm: usize,
    /// Upper factor; `au[i * mm + j]` holds column `i + j` of row `i`.
    au: Vec<f64>,
    /// Elimination multipliers: `al[k * m1 + t]` applied to row `k + 1 + t`.
    al: Vec<f64>,
    /// Row swapped with row `k` during step `k`.
    piv: Vec<u32>,
}

impl BandedLu {
    pub fn factor(a: &BandedMatrix) -> Result<Self> {
        let n = a.n;
        let m1 = a.lower;
        let m2 = a.upper;
        let mm = m1 + m2 + 1;
        let mut au = vec![0.0; n * mm];
        let mut al = vec![0.0; n * m1];
        let mut piv = vec![0u32; n];

        // Load the band, anchoring each of the first m1 rows at column 0 so
        // that all rows active at step k share the column origin k.
        for i in 0..n {
            let (start, end) = a.row_range(i);
            let origin = i.saturating_sub(m1);
            for j in start..end {
                au[i * mm + (j - origin)] = a.get(i, j);
            }
        }

        for k in 0..n {
            let l = m1.min(n - k - 1);
            // Pivot: largest leading entry among the active rows.
            let mut pivot_row = k;
            let mut best = au[k * mm].abs();
            for i in k + 1..=k + l {
                let v = au[i * mm].abs();
                if v > best {
                    best = v;
                    pivot_row = i;
                }
            }
            if best == 0.0 {
                return Err(Error::SingularFactor { index: k });
            }
            piv[k] = pivot_row as u32;
            if pivot_row != k {
                for j in 0..mm {
                    au.swap(k * mm + j, pivot_row * mm + j);
                }
            }
            let pivot = au[k * mm];
            for i in k + 1..=k + l {
                let mult = au[i * mm] / pivot;
                al[k * m1 + (i - k - 1)] = mult;
                // Eliminate and shift row i one slot left: its origin moves
                // from column k to column k + 1.
                for j in 1..mm {
                    au[i * mm + j - 1] = au[i * mm + j] - mult * au[k * mm + j];
                }
                au[i * mm + mm - 1] = 0.0;
            }
        }

        Ok(Self {
            n,
            m1,
            mm,
            au,
            al,
            piv,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        let (n, m1, mm) = (self.n, self.m1, self.mm);
        for k in 0..n {
            let p = self.piv[k] as usize;
            if p != k {
                b.swap(k, p);
            }
            let l = m1.min(n - k - 1);
            for i in 1..=l {
                b[k + i] -= self.al[k * m1 + (i - 1)] * b[k];
            }
        }
        for i in (0..n).rev() {
            let mut sum = b[i];
            let reach = (mm - 1).min(n - 1 - i);
            for j in 1..=reach {
                sum -= self.au[i * mm + j] * b[i + j];
            }
            b[i] = sum / self.au[i * mm];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Materializes the inverse column by column; test and oracle use only.
    pub fn to_dense_inverse(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut out = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            self.solve_in_place(&mut e);
            for i in 0..n {
                out[(i, j)] = e[i];
            }
        }
        out
    }
}
