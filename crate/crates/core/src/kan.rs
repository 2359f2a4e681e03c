//! Kolmogorov-Arnold layers and the opacity / covariance heads built on them.
//!
//! Every edge `(q, p)` of a layer carries its own univariate activation
//! `φ(x) = w_b·silu(x) + w_s·Σ_m c_m B_m(x)` where `B_m` are B-splines of a
//! fixed degree on a uniform knot grid; a neuron sums its incoming edges.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::{sigmoid, silu, silu_grad, Linear};
use crate::scene::Vec3;
use crate::tensor::{join, Parameters, Tensor};

pub const DEFAULT_GRID: usize = 5;
pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_HIDDEN: usize = 16;

/// `intervals` uniform intervals on `[lo, hi]`, extended by `order` knots on
/// each side.
pub fn uniform_knots(intervals: usize, order: usize, lo: f64, hi: f64) -> Vec<f64> {
    let h = (hi - lo) / intervals as f64;
    (0..intervals + 2 * order + 1)
        .map(|i| lo + (i as f64 - order as f64) * h)
        .collect()
}

fn basis_len(knots: &[f64], order: usize) -> usize {
    knots.len() - 2 * order - 1 + order
}

fn grid_range(knots: &[f64], order: usize) -> (f64, f64) {
    (knots[order], knots[knots.len() - 1 - order])
}

/// Cox–de Boor values of all degree-`order` B-splines on `knots` at `x`.
/// Inputs outside the grid range are clamped to it first.
pub fn spline_basis(x: f64, knots: &[f64], order: usize) -> Vec<f64> {
    let mut b = vec![0.0; basis_len(knots, order)];
    let mut db = vec![0.0; b.len()];
    basis_into(x, knots, order, &mut b, &mut db);
    b
}

/// Fills basis values and their derivatives w.r.t. `x`. Returns `false`
/// (and zero derivatives) when `x` was clamped.
fn basis_into(x: f64, knots: &[f64], order: usize, out: &mut [f64], dout: &mut [f64]) -> bool {
    let (lo, hi) = grid_range(knots, order);
    let inside = (lo..=hi).contains(&x);
    let x = x.clamp(lo, hi);
    let n = knots.len() - 1;
    let mut b = vec![0.0; n];
    for i in 0..n {
        if knots[i] <= x && x < knots[i + 1] {
            b[i] = 1.0;
        }
    }
    let mut prev = Vec::new();
    for d in 1..=order {
        if d == order {
            prev = b.clone();
        }
        for i in 0..n - d {
            let left = (x - knots[i]) / (knots[i + d] - knots[i]) * b[i];
            let right = (knots[i + d + 1] - x) / (knots[i + d + 1] - knots[i + 1]) * b[i + 1];
            b[i] = left + right;
        }
        b[n - d] = 0.0;
    }
    let m = out.len();
    out.copy_from_slice(&b[..m]);
    if !inside || order == 0 {
        dout.iter_mut().for_each(|v| *v = 0.0);
        return inside;
    }
    let p = order as f64;
    for i in 0..m {
        let a = prev[i] / (knots[i + order] - knots[i]);
        let c = prev[i + 1] / (knots[i + order + 1] - knots[i + 1]);
        dout[i] = p * (a - c);
    }
    true
}

#[derive(Clone, Debug, PartialEq)]
pub struct KanLayer {
    n_in: usize,
    n_out: usize,
    order: usize,
    knots: Vec<f64>,
    /// `[n_out, n_in, G + order]`
    pub coefficients: Tensor,
    /// `[n_out, n_in]`
    pub base_weight: Tensor,
    /// `[n_out, n_in]`
    pub spline_weight: Tensor,
}

#[derive(Clone, Debug)]
pub struct KanLayerCache {
    basis: Vec<f64>,
    dbasis: Vec<f64>,
}

impl KanLayer {
    pub fn zeros(n_in: usize, n_out: usize, grid: usize, order: usize) -> Self {
        let knots = uniform_knots(grid, order, -1.0, 1.0);
        let nb = basis_len(&knots, order);
        Self {
            n_in,
            n_out,
            order,
            knots,
            coefficients: Tensor::zeros(&[n_out, n_in, nb]),
            base_weight: Tensor::zeros(&[n_out, n_in]),
            spline_weight: Tensor::zeros(&[n_out, n_in]),
        }
    }

    /// Coefficients `N(0, 0.1²)·0.1`, spline weight 1, base weight uniform
    /// in `±1/√n_in`.
    pub fn init<R: Rng>(n_in: usize, n_out: usize, grid: usize, order: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(n_in, n_out, grid, order);
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        for c in layer.coefficients.data_mut() {
            *c = normal.sample(rng) * 0.1;
        }
        layer.spline_weight.fill(1.0);
        let bound = 1.0 / (n_in as f64).sqrt();
        for w in layer.base_weight.data_mut() {
            *w = rng.gen_range(-bound..=bound);
        }
        layer
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn basis_count(&self) -> usize {
        basis_len(&self.knots, self.order)
    }

    /// Spline part of edge `(q, p)` evaluated for precomputed basis values.
    fn edge(&self, q: usize, p: usize, x: f64, basis: &[f64]) -> f64 {
        let nb = basis.len();
        let e = q * self.n_in + p;
        let c = &self.coefficients.data()[e * nb..(e + 1) * nb];
        let spline: f64 = c.iter().zip(basis).map(|(a, b)| a * b).sum();
        self.base_weight.data()[e] * silu(x) + self.spline_weight.data()[e] * spline
    }

    /// `φ_{q,p}(x)`
    pub fn activation(&self, q: usize, p: usize, x: f64) -> f64 {
        self.edge(q, p, x, &spline_basis(x, &self.knots, self.order))
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> (Vec<f64>, KanLayerCache) {
        let nb = self.basis_count();
        let mut basis = vec![0.0; rows * self.n_in * nb];
        let mut dbasis = vec![0.0; rows * self.n_in * nb];
        for (i, &v) in x.iter().enumerate() {
            basis_into(v, &self.knots, self.order, &mut basis[i * nb..(i + 1) * nb], &mut dbasis[i * nb..(i + 1) * nb]);
        }
        let mut out = vec![0.0; rows * self.n_out];
        for r in 0..rows {
            for p in 0..self.n_in {
                let xi = x[r * self.n_in + p];
                let b = &basis[(r * self.n_in + p) * nb..(r * self.n_in + p + 1) * nb];
                for q in 0..self.n_out {
                    out[r * self.n_out + q] += self.edge(q, p, xi, b);
                }
            }
        }
        (out, KanLayerCache { basis, dbasis })
    }

    pub fn backward(&self, x: &[f64], rows: usize, cache: &KanLayerCache, grad_out: &[f64], grads: &mut KanLayer) -> Vec<f64> {
        let nb = self.basis_count();
        let mut grad_in = vec![0.0; x.len()];
        let coeffs = self.coefficients.data();
        for r in 0..rows {
            for p in 0..self.n_in {
                let i = r * self.n_in + p;
                let xi = x[i];
                let (s, ds) = (silu(xi), silu_grad(xi));
                let b = &cache.basis[i * nb..(i + 1) * nb];
                let db = &cache.dbasis[i * nb..(i + 1) * nb];
                for q in 0..self.n_out {
                    let g = grad_out[r * self.n_out + q];
                    if g == 0.0 {
                        continue;
                    }
                    let e = q * self.n_in + p;
                    let c = &coeffs[e * nb..(e + 1) * nb];
                    let ws = self.spline_weight.data()[e];
                    let spline: f64 = c.iter().zip(b).map(|(a, v)| a * v).sum();
                    let dspline: f64 = c.iter().zip(db).map(|(a, v)| a * v).sum();
                    grads.base_weight.data_mut()[e] += g * s;
                    grads.spline_weight.data_mut()[e] += g * spline;
                    let gc = &mut grads.coefficients.data_mut()[e * nb..(e + 1) * nb];
                    for m in 0..nb {
                        gc[m] += g * ws * b[m];
                    }
                    grad_in[i] += g * (self.base_weight.data()[e] * ds + ws * dspline);
                }
            }
        }
        grad_in
    }
}

impl Parameters for KanLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "coefficients"), &self.coefficients);
        f(join(prefix, "base_weight"), &self.base_weight);
        f(join(prefix, "spline_weight"), &self.spline_weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "coefficients"), &mut self.coefficients);
        f(join(prefix, "base_weight"), &mut self.base_weight);
        f(join(prefix, "spline_weight"), &mut self.spline_weight);
    }
}

/// Composition of KAN layers, applied first to last.
#[derive(Clone, Debug, PartialEq)]
pub struct KanNetwork {
    pub layers: Vec<KanLayer>,
}

#[derive(Clone, Debug)]
pub struct KanNetworkCache {
    inputs: Vec<Vec<f64>>,
    layers: Vec<KanLayerCache>,
}

impl KanNetwork {
    /// Network with layer widths `widths` (e.g. `[36, 16, 10]`).
    pub fn init<R: Rng>(widths: &[usize], grid: usize, order: usize, rng: &mut R) -> Self {
        Self {
            layers: widths
                .windows(2)
                .map(|w| KanLayer::init(w[0], w[1], grid, order, rng))
                .collect(),
        }
    }

    pub fn zeros(widths: &[usize], grid: usize, order: usize) -> Self {
        Self {
            layers: widths
                .windows(2)
                .map(|w| KanLayer::zeros(w[0], w[1], grid, order))
                .collect(),
        }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().expect("non-empty network").n_out
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> (Vec<f64>, KanNetworkCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for layer in &self.layers {
            let (out, cache) = layer.forward(&current, rows);
            inputs.push(std::mem::replace(&mut current, out));
            caches.push(cache);
        }
        (current, KanNetworkCache { inputs, layers: caches })
    }

    pub fn backward(&self, rows: usize, cache: &KanNetworkCache, grad_out: &[f64], grads: &mut KanNetwork) -> Vec<f64> {
        let mut grad = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            grad = layer.backward(&cache.inputs[i], rows, &cache.layers[i], &grad, &mut grads.layers[i]);
        }
        grad
    }
}

impl Parameters for KanNetwork {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

/// `kan_forward` on a single input vector.
pub fn kan_forward(net: &KanNetwork, z: &[f64]) -> Vec<f64> {
    net.forward(z, 1).0
}

/// Backbone of an attribute head: a KAN, or a plain linear map when the KAN
/// is ablated.
#[derive(Clone, Debug, PartialEq)]
pub enum AttributeNet {
    Kan(KanNetwork),
    Linear(Linear),
}

#[derive(Clone, Debug)]
pub enum AttributeCache {
    Kan(KanNetworkCache),
    Linear,
}

impl AttributeNet {
    pub fn n_out(&self) -> usize {
        match self {
            Self::Kan(k) => k.n_out(),
            Self::Linear(l) => l.n_out(),
        }
    }

    /// Squashes `f_in` by tanh, then evaluates the backbone.
    fn forward(&self, f_in: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>, AttributeCache) {
        let squashed: Vec<f64> = f_in.iter().map(|v| v.tanh()).collect();
        match self {
            Self::Kan(k) => {
                let (out, cache) = k.forward(&squashed, rows);
                (out, squashed, AttributeCache::Kan(cache))
            }
            Self::Linear(l) => (l.forward(&squashed, rows), squashed, AttributeCache::Linear),
        }
    }

    fn backward(&self, squashed: &[f64], rows: usize, cache: &AttributeCache, grad_out: &[f64], grads: &mut AttributeNet) -> Vec<f64> {
        let dsq = match (self, cache, grads) {
            (Self::Kan(k), AttributeCache::Kan(c), Self::Kan(g)) => k.backward(rows, c, grad_out, g),
            (Self::Linear(l), AttributeCache::Linear, Self::Linear(g)) => l.backward(squashed, rows, grad_out, g),
            _ => panic!("attribute head gradient buffer does not match its parameters"),
        };
        dsq.iter().zip(squashed).map(|(g, s)| g * (1.0 - s * s)).collect()
    }
}

impl Parameters for AttributeNet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            Self::Kan(k) => k.visit(&join(prefix, "kan"), f),
            Self::Linear(l) => l.visit(&join(prefix, "linear"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            Self::Kan(k) => k.visit_mut(&join(prefix, "kan"), f),
            Self::Linear(l) => l.visit_mut(&join(prefix, "linear"), f),
        }
    }
}

/// Opacity head: `α = tanh(net(tanh(f_in)))`, keep mask `α ≥ τ_α`.
#[derive(Clone, Debug, PartialEq)]
pub struct OpacityHead {
    pub net: AttributeNet,
    pub tau_alpha: f64,
}

#[derive(Clone, Debug)]
pub struct OpacityOutput {
    /// `N×k` opacities in `(-1, 1)`.
    pub alpha: Vec<f64>,
    pub keep: Vec<bool>,
    squashed: Vec<f64>,
    cache: AttributeCache,
}

impl OpacityHead {
    pub fn forward(&self, f_in: &[f64], rows: usize) -> OpacityOutput {
        let (raw, squashed, cache) = self.net.forward(f_in, rows);
        let alpha: Vec<f64> = raw.into_iter().map(f64::tanh).collect();
        let keep = alpha.iter().map(|a| *a >= self.tau_alpha).collect();
        OpacityOutput {
            alpha,
            keep,
            squashed,
            cache,
        }
    }

    /// `dL/dα -> dL/df_in`.
    pub fn backward(&self, out: &OpacityOutput, rows: usize, grad_alpha: &[f64], grads: &mut OpacityHead) -> Vec<f64> {
        let draw: Vec<f64> = out.alpha.iter().zip(grad_alpha).map(|(a, g)| g * (1.0 - a * a)).collect();
        self.net.backward(&out.squashed, rows, &out.cache, &draw, &mut grads.net)
    }
}

/// Covariance head: per Gaussian, 3 scale logits and 4 quaternion components.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceHead {
    pub net: AttributeNet,
}

pub const COV_OUTPUTS: usize = 7;
const IDENTITY_QUAT: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

#[derive(Clone, Debug)]
pub struct CovarianceOutput {
    /// One per Gaussian (`N·k`), `0 < s < l_v`.
    pub scales: Vec<Vec3>,
    /// Raw quaternions (identity where the raw output degenerated).
    pub quaternions: Vec<[f64; 4]>,
    /// Number of Gaussians that fell back to the identity rotation.
    pub fallback_count: usize,
    fallback: Vec<bool>,
    sig: Vec<Vec3>,
    squashed: Vec<f64>,
    cache: AttributeCache,
}

impl CovarianceOutput {
    /// Unit quaternions.
    pub fn rotations(&self) -> Vec<[f64; 4]> {
        self.quaternions
            .iter()
            .map(|q| {
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
            })
            .collect()
    }
}

impl CovarianceHead {
    /// `base_scales[i]` is anchor `i`'s `l_v`.
    pub fn forward(&self, f_in: &[f64], rows: usize, base_scales: &[Vec3]) -> CovarianceOutput {
        let (raw, squashed, cache) = self.net.forward(f_in, rows);
        let k = self.net.n_out() / COV_OUTPUTS;
        let mut scales = Vec::with_capacity(rows * k);
        let mut sig = Vec::with_capacity(rows * k);
        let mut quaternions = Vec::with_capacity(rows * k);
        let mut fallback = Vec::with_capacity(rows * k);
        for r in 0..rows {
            for j in 0..k {
                let o = &raw[(r * k + j) * COV_OUTPUTS..(r * k + j + 1) * COV_OUTPUTS];
                let s = Vec3::new(sigmoid(o[0]), sigmoid(o[1]), sigmoid(o[2]));
                scales.push(base_scales[r].component_mul(&s));
                sig.push(s);
                let q = [o[3], o[4], o[5], o[6]];
                let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-9 {
                    quaternions.push(IDENTITY_QUAT);
                    fallback.push(true);
                } else {
                    quaternions.push(q);
                    fallback.push(false);
                }
            }
        }
        CovarianceOutput {
            scales,
            quaternions,
            fallback_count: fallback.iter().filter(|f| **f).count(),
            fallback,
            sig,
            squashed,
            cache,
        }
    }

    /// Returns `(dL/df_in, dL/dl_v per anchor)` from gradients w.r.t. the
    /// decoded scales and raw quaternions.
    pub fn backward(
        &self,
        out: &CovarianceOutput,
        rows: usize,
        base_scales: &[Vec3],
        grad_scales: &[Vec3],
        grad_quats: &[[f64; 4]],
        grads: &mut CovarianceHead,
    ) -> (Vec<f64>, Vec<Vec3>) {
        let k = self.net.n_out() / COV_OUTPUTS;
        let mut draw = vec![0.0; rows * k * COV_OUTPUTS];
        let mut dbase = vec![Vec3::zeros(); rows];
        for r in 0..rows {
            for j in 0..k {
                let g = r * k + j;
                let d = &mut draw[g * COV_OUTPUTS..(g + 1) * COV_OUTPUTS];
                for a in 0..3 {
                    let s = out.sig[g][a];
                    d[a] = grad_scales[g][a] * base_scales[r][a] * s * (1.0 - s);
                    dbase[r][a] += grad_scales[g][a] * s;
                }
                if !out.fallback[g] {
                    d[3..7].copy_from_slice(&grad_quats[g]);
                }
            }
        }
        let df = self.net.backward(&out.squashed, rows, &out.cache, &draw, &mut grads.net);
        (df, dbase)
    }
}

#[cfg(test)]
mod tests;
