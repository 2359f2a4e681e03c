//! Dense layers and scalar activations shared by the attribute heads.

use rand::Rng;

use crate::tensor::{join, Parameters, Tensor};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward of `p = softmax(l)`: `dl = p ⊙ (dp − ⟨p, dp⟩)`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - dot)).collect()
}

/// Affine map `y = W x + b` applied to each row of a row-major batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[n_out, n_in]`
    pub weight: Tensor,
    /// `[n_out]`
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[n_out, n_in]),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    /// Weights and bias uniform in `±1/√n_in`.
    pub fn uniform<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[n_out, n_in], bound, rng),
            bias: Tensor::uniform(&[n_out], bound, rng),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (n_in, n_out) = (self.n_in(), self.n_out());
        debug_assert_eq!(x.len(), rows * n_in);
        let w = self.weight.data();
        let b = self.bias.data();
        let mut out = vec![0.0; rows * n_out];
        for r in 0..rows {
            let xr = &x[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let wo = &w[o * n_in..(o + 1) * n_in];
                out[r * n_out + o] = b[o] + wo.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], rows: usize, grad_out: &[f64], grads: &mut Linear) -> Vec<f64> {
        let (n_in, n_out) = (self.n_in(), self.n_out());
        let w = self.weight.data();
        let mut grad_in = vec![0.0; rows * n_in];
        for r in 0..rows {
            let xr = &x[r * n_in..(r + 1) * n_in];
            let gi = &mut grad_in[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let g = grad_out[r * n_out + o];
                if g == 0.0 {
                    continue;
                }
                grads.bias.data_mut()[o] += g;
                let gw = &mut grads.weight.data_mut()[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    gw[i] += g * xr[i];
                    gi[i] += g * w[o * n_in + i];
                }
            }
        }
        grad_in
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
