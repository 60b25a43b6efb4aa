//! Small tanh multilayer perceptrons over a flat parameter vector.
//!
//! Networks here are deliberately minimal: dense layers with tanh
//! activations and a linear output layer, parameters stored in one flat
//! `Vec<f64>` (layer by layer, each layer's weights row-major followed by
//! its biases). The same configuration drives three evaluation paths:
//! plain `f64` forward passes for prediction, and recording onto a
//! [`Tape`](crate::autodiff::Tape) via fused weighted-sum nodes for
//! training, where each neuron is a single tape node and parameter
//! gradients fall out of the reverse sweep.
//!
//! Initialization is deterministic: Glorot-uniform weights
//! (`U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`) drawn from a
//! seeded ChaCha stream, biases zero. The same seed always produces the
//! same network.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tape, Var};
use crate::{Error, Result};

/// Shape of a multilayer perceptron: `input_dim -> hidden[0] -> ... -> output_dim`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpConfig {
    input_dim: usize,
    hidden: Vec<usize>,
    output_dim: usize,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config {
                path: "network".into(),
                reason: "layer widths must be positive".into(),
            });
        }
        Ok(Self {
            input_dim,
            hidden,
            output_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    /// `(fan_in, fan_out)` of each layer, in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &w in &self.hidden {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    /// Total number of parameters (weights + biases across all layers).
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fi, fo)| fo * (fi + 1))
            .sum()
    }

    /// Deterministic Glorot-uniform initialization with zero biases.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layer_dims() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push((2.0 * rng.random::<f64>() - 1.0) * limit);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        params
    }

    /// Plain forward pass. `params[offset..]` must hold this network's
    /// parameters; the outputs are written to `out`.
    pub fn forward(&self, params: &[f64], offset: usize, x: &[f64], out: &mut [f64]) {
        let mut buf = x.to_vec();
        self.forward_scalar(params, offset, &mut buf);
        out.copy_from_slice(&buf);
    }

    /// Forward pass over any scalar backend: plain numbers, Taylor jets, or
    /// tape variables. `cur` holds the inputs on entry and the outputs on
    /// exit. The weights stay plain `f64` (a frozen network), so this is the
    /// evaluation path for computing a trained network's values *and* input
    /// derivatives without a tape.
    pub fn forward_scalar<S: Scalar>(&self, params: &[f64], offset: usize, cur: &mut Vec<S>) {
        debug_assert_eq!(cur.len(), self.input_dim);
        let mut off = offset;
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        for (l, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            let w = &params[off..off + fan_in * fan_out];
            let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let mut next = Vec::with_capacity(fan_out);
            for k in 0..fan_out {
                let row = &w[k * fan_in..(k + 1) * fan_in];
                let pre = S::lin_comb(cur, row).offset(b[k]);
                next.push(if l == last { pre } else { pre.tanh() });
            }
            *cur = next;
            off += fan_in * fan_out + fan_out;
        }
        debug_assert_eq!(cur.len(), self.output_dim);
    }

    /// Records the network at one input point onto `tape`, one fused
    /// weighted-sum node per neuron. Returns the output head variables,
    /// whose jets carry value and input-derivative components per the
    /// tape's layout.
    pub fn emit<'t>(&self, tape: &'t Tape, inputs: &[Var<'t>], offset: usize) -> Vec<Var<'t>> {
        debug_assert_eq!(inputs.len(), self.input_dim);
        let mut cur: Vec<Var<'t>> = inputs.to_vec();
        let mut off = offset;
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        for (l, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            let w_off = off;
            let b_off = off + fan_in * fan_out;
            let mut next = Vec::with_capacity(fan_out);
            for k in 0..fan_out {
                let pre = tape.weighted_sum(&cur, w_off + k * fan_in, Some(b_off + k));
                next.push(if l == last { pre } else { pre.tanh() });
            }
            cur = next;
            off = b_off + fan_out;
        }
        cur
    }
}
