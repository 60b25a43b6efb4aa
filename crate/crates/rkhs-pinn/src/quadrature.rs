//! Gauss-Hermite quadrature for Gaussian expectations.
//!
//! Physicists' convention: nodes and weights satisfy
//! `integral exp(-y^2) f(y) dy ~ sum_q w_q f(y_q)`, exact for polynomials up
//! to degree `2n - 1`. Nodes are the eigenvalues of the symmetric Jacobi
//! matrix of the Hermite recurrence (zero diagonal, off-diagonal
//! `sqrt(k/2)`); the weight for node `q` is `sqrt(pi)` times the squared
//! first component of its normalized eigenvector (Golub-Welsch).
//!
//! Expectations over a standard normal substitute `z = sqrt(2) y`:
//! `E[f(Z)] = (1/sqrt(pi)) sum_q w_q f(sqrt(2) y_q)`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::{Error, Result};

/// A Gauss-Hermite rule of fixed size, nodes sorted ascending.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config {
                path: "quadrature.nodes".into(),
                reason: "a quadrature rule needs at least one node".into(),
            });
        }
        let sqrt_pi = std::f64::consts::PI.sqrt();
        if n == 1 {
            return Ok(Self {
                nodes: vec![0.0],
                weights: vec![sqrt_pi],
            });
        }
        let mut jacobi = DMatrix::zeros(n, n);
        for k in 1..n {
            let b = (k as f64 / 2.0).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for &q in &order {
            nodes.push(eig.eigenvalues[q]);
            let first = eig.eigenvectors[(0, q)];
            weights.push(sqrt_pi * first * first);
        }
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `integral exp(-y^2) f(y) dy`.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&y, &w)| w * f(y))
            .sum()
    }

    /// `E[f(Z)]` for `Z ~ N(0, 1)`.
    pub fn expect_std_normal(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&y, &w)| w * inv_sqrt_pi * f(std::f64::consts::SQRT_2 * y))
            .sum()
    }

    /// The standard-normal sample points `sqrt(2) y_q` and their
    /// probability weights `w_q / sqrt(pi)` (which sum to 1). Useful when a
    /// caller needs the rule's points rather than a closure evaluation.
    pub fn std_normal_rule(&self) -> (Vec<f64>, Vec<f64>) {
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        (
            self.nodes.iter().map(|y| std::f64::consts::SQRT_2 * y).collect(),
            self.weights.iter().map(|w| w * inv_sqrt_pi).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn one_and_two_point_rules_are_classical() {
        let pi = std::f64::consts::PI;
        let r1 = GaussHermite::new(1).unwrap();
        assert_eq!(r1.nodes(), &[0.0]);
        assert_relative_eq!(r1.weights()[0], pi.sqrt(), max_relative = 1e-14);
        // Two-point rule: nodes +-1/sqrt(2), weights sqrt(pi)/2.
        let r2 = GaussHermite::new(2).unwrap();
        assert_relative_eq!(r2.nodes()[0], -(0.5f64).sqrt(), max_relative = 1e-12);
        assert_relative_eq!(r2.nodes()[1], (0.5f64).sqrt(), max_relative = 1e-12);
        assert_relative_eq!(r2.weights()[0], pi.sqrt() / 2.0, max_relative = 1e-12);
        assert_relative_eq!(r2.weights()[1], pi.sqrt() / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn hermite_moments_are_exact() {
        // integral exp(-y^2) y^{2k} dy = sqrt(pi) * (2k-1)!! / 2^k.
        let pi = std::f64::consts::PI;
        let rule = GaussHermite::new(5).unwrap();
        let moments = [
            (0u32, pi.sqrt()),
            (2, pi.sqrt() / 2.0),
            (4, 3.0 * pi.sqrt() / 4.0),
            (6, 15.0 * pi.sqrt() / 8.0),
            (8, 105.0 * pi.sqrt() / 16.0),
        ];
        for (k, want) in moments {
            let got = rule.integrate(|y| y.powi(k as i32));
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
        // Odd moments vanish by symmetry.
        for k in [1, 3, 5, 7] {
            assert_abs_diff_eq!(rule.integrate(|y| y.powi(k)), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn standard_normal_moments() {
        let rule = GaussHermite::new(8).unwrap();
        assert_relative_eq!(rule.expect_std_normal(|_| 1.0), 1.0, max_relative = 1e-13);
        assert_relative_eq!(rule.expect_std_normal(|z| z * z), 1.0, max_relative = 1e-12);
        assert_relative_eq!(
            rule.expect_std_normal(|z| z.powi(4)),
            3.0,
            max_relative = 1e-12
        );
        // E[exp(Z)] = exp(1/2); not polynomial, so only near-exact.
        let got = rule.expect_std_normal(f64::exp);
        assert_relative_eq!(got, (0.5f64).exp(), max_relative = 1e-8);
    }

    #[test]
    fn nodes_are_sorted_and_symmetric() {
        let rule = GaussHermite::new(13).unwrap();
        let n = rule.len();
        for w in rule.nodes().windows(2) {
            assert!(w[0] < w[1]);
        }
        for q in 0..n {
            assert_abs_diff_eq!(rule.nodes()[q], -rule.nodes()[n - 1 - q], epsilon = 1e-12);
            assert_relative_eq!(
                rule.weights()[q],
                rule.weights()[n - 1 - q],
                max_relative = 1e-10
            );
        }
        let (pts, wts) = rule.std_normal_rule();
        assert_relative_eq!(wts.iter().sum::<f64>(), 1.0, max_relative = 1e-13);
        assert_abs_diff_eq!(pts[n / 2], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_size_rule_is_rejected() {
        assert!(GaussHermite::new(0).is_err());
    }
}
