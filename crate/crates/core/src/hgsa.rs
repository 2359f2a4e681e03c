//! Hierarchical granular-structural attention color head.
//!
//! Each input row (`δ_vc ⊕ d⃗_vc ⊕ f̂_v`, 36 values) is viewed as a 6×6 grid.
//! The granular stage pools the grid along both axes, turns each pooled
//! vector into a sigmoid gate through a width-3 convolution and a learned
//! normalization, and rescales the grid by both gates. The structural stage
//! runs multi-head self-attention over the rows (one row per visible anchor)
//! followed by a residual connection and LayerNorm.

use rand::Rng;

use crate::nn::{sigmoid, Linear};
use crate::tensor::{join, Parameters, Tensor};

/// Row width: distance, direction and the 32-wide blended feature.
pub const INPUT_DIM: usize = 36;
/// Side of the square grid each row is reshaped to.
pub const GRID: usize = 6;
pub const DEFAULT_HEADS: usize = 7;
pub const HEAD_DIM: usize = 5;
const KERNEL: usize = 3;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GranularParams {
    pub conv_h: Tensor,
    pub conv_h_bias: Tensor,
    pub conv_w: Tensor,
    pub conv_w_bias: Tensor,
    pub norm_h_gain: Tensor,
    pub norm_h_bias: Tensor,
    pub norm_w_gain: Tensor,
    pub norm_w_bias: Tensor,
}

impl GranularParams {
    pub fn zeros() -> Self {
        Self {
            conv_h: Tensor::zeros(&[KERNEL]),
            conv_h_bias: Tensor::zeros(&[1]),
            conv_w: Tensor::zeros(&[KERNEL]),
            conv_w_bias: Tensor::zeros(&[1]),
            norm_h_gain: Tensor::zeros(&[GRID]),
            norm_h_bias: Tensor::zeros(&[GRID]),
            norm_w_gain: Tensor::zeros(&[GRID]),
            norm_w_bias: Tensor::zeros(&[GRID]),
        }
    }

    pub fn init<R: Rng>(rng: &mut R) -> Self {
        let bound = 1.0 / (KERNEL as f64).sqrt();
        Self {
            conv_h: Tensor::uniform(&[KERNEL], bound, rng),
            conv_h_bias: Tensor::uniform(&[1], bound, rng),
            conv_w: Tensor::uniform(&[KERNEL], bound, rng),
            conv_w_bias: Tensor::uniform(&[1], bound, rng),
            norm_h_gain: Tensor::full(&[GRID], 1.0),
            norm_h_bias: Tensor::zeros(&[GRID]),
            norm_w_gain: Tensor::full(&[GRID], 1.0),
            norm_w_bias: Tensor::zeros(&[GRID]),
        }
    }
}

impl Parameters for GranularParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "conv_h"), &self.conv_h);
        f(join(prefix, "conv_h_bias"), &self.conv_h_bias);
        f(join(prefix, "conv_w"), &self.conv_w);
        f(join(prefix, "conv_w_bias"), &self.conv_w_bias);
        f(join(prefix, "norm_h_gain"), &self.norm_h_gain);
        f(join(prefix, "norm_h_bias"), &self.norm_h_bias);
        f(join(prefix, "norm_w_gain"), &self.norm_w_gain);
        f(join(prefix, "norm_w_bias"), &self.norm_w_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "conv_h"), &mut self.conv_h);
        f(join(prefix, "conv_h_bias"), &mut self.conv_h_bias);
        f(join(prefix, "conv_w"), &mut self.conv_w);
        f(join(prefix, "conv_w_bias"), &mut self.conv_w_bias);
        f(join(prefix, "norm_h_gain"), &mut self.norm_h_gain);
        f(join(prefix, "norm_h_bias"), &mut self.norm_h_bias);
        f(join(prefix, "norm_w_gain"), &mut self.norm_w_gain);
        f(join(prefix, "norm_w_bias"), &mut self.norm_w_bias);
    }
}

/// One direction of the granular stage: pooled vector -> gate.
#[derive(Clone, Debug, Default)]
struct GateCache {
    pooled: [f64; GRID],
    normalized: [f64; GRID],
    inv_std: f64,
    gate: [f64; GRID],
}

fn gate_forward(pooled: [f64; GRID], kernel: &[f64], bias: f64, gain: &[f64], beta: &[f64]) -> GateCache {
    let mut conv = [0.0; GRID];
    for i in 0..GRID {
        let mut acc = bias;
        for t in 0..KERNEL {
            let j = i as isize + t as isize - 1;
            if (0..GRID as isize).contains(&j) {
                acc += kernel[t] * pooled[j as usize];
            }
        }
        conv[i] = acc;
    }
    let mean = conv.iter().sum::<f64>() / GRID as f64;
    let var = conv.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / GRID as f64;
    let inv_std = 1.0 / (var + NORM_EPS).sqrt();
    let mut normalized = [0.0; GRID];
    let mut gate = [0.0; GRID];
    for i in 0..GRID {
        normalized[i] = (conv[i] - mean) * inv_std;
        gate[i] = sigmoid(gain[i] * normalized[i] + beta[i]);
    }
    GateCache {
        pooled,
        normalized,
        inv_std,
        gate,
    }
}

struct GateGrads<'a> {
    kernel: &'a mut [f64],
    bias: &'a mut f64,
    gain: &'a mut [f64],
    beta: &'a mut [f64],
}

/// Returns `dL/dpooled` given `dL/dgate`.
fn gate_backward(cache: &GateCache, kernel: &[f64], gain: &[f64], dgate: &[f64; GRID], grads: GateGrads) -> [f64; GRID] {
    let mut dn = [0.0; GRID];
    for i in 0..GRID {
        let y = cache.gate[i];
        let du = dgate[i] * y * (1.0 - y);
        grads.gain[i] += du * cache.normalized[i];
        grads.beta[i] += du;
        dn[i] = du * gain[i];
    }
    let mean_dn = dn.iter().sum::<f64>() / GRID as f64;
    let mean_dn_n = dn.iter().zip(&cache.normalized).map(|(a, b)| a * b).sum::<f64>() / GRID as f64;
    let mut dpooled = [0.0; GRID];
    for i in 0..GRID {
        let dc = cache.inv_std * (dn[i] - mean_dn - cache.normalized[i] * mean_dn_n);
        *grads.bias += dc;
        for t in 0..KERNEL {
            let j = i as isize + t as isize - 1;
            if (0..GRID as isize).contains(&j) {
                grads.kernel[t] += dc * cache.pooled[j as usize];
                dpooled[j as usize] += dc * kernel[t];
            }
        }
    }
    dpooled
}

#[derive(Clone, Debug)]
pub struct GranularCache {
    rows: Vec<(GateCache, GateCache)>,
}

fn pool(row: &[f64]) -> ([f64; GRID], [f64; GRID]) {
    let mut zh = [0.0; GRID];
    let mut zw = [0.0; GRID];
    for h in 0..GRID {
        for w in 0..GRID {
            let v = row[h * GRID + w];
            zh[h] += v;
            zw[w] += v;
        }
    }
    for i in 0..GRID {
        zh[i] /= GRID as f64;
        zw[i] /= GRID as f64;
    }
    (zh, zw)
}

pub fn granular_forward(f_in: &[f64], rows: usize, p: &GranularParams) -> (Vec<f64>, GranularCache) {
    debug_assert_eq!(f_in.len(), rows * INPUT_DIM);
    let mut out = vec![0.0; f_in.len()];
    let mut caches = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &f_in[r * INPUT_DIM..(r + 1) * INPUT_DIM];
        let (zh, zw) = pool(row);
        let gh = gate_forward(zh, p.conv_h.data(), p.conv_h_bias.data()[0], p.norm_h_gain.data(), p.norm_h_bias.data());
        let gw = gate_forward(zw, p.conv_w.data(), p.conv_w_bias.data()[0], p.norm_w_gain.data(), p.norm_w_bias.data());
        let o = &mut out[r * INPUT_DIM..(r + 1) * INPUT_DIM];
        for h in 0..GRID {
            for w in 0..GRID {
                o[h * GRID + w] = row[h * GRID + w] * gh.gate[h] * gw.gate[w];
            }
        }
        caches.push((gh, gw));
    }
    (out, GranularCache { rows: caches })
}

/// Directional pooling gates applied to every row of `f_in` (N×36).
pub fn granular_attention(f_in: &[f64], rows: usize, p: &GranularParams) -> Vec<f64> {
    granular_forward(f_in, rows, p).0
}

pub fn granular_backward(
    f_in: &[f64],
    rows: usize,
    p: &GranularParams,
    cache: &GranularCache,
    grad_out: &[f64],
    grads: &mut GranularParams,
) -> Vec<f64> {
    let mut grad_in = vec![0.0; f_in.len()];
    for r in 0..rows {
        let row = &f_in[r * INPUT_DIM..(r + 1) * INPUT_DIM];
        let g = &grad_out[r * INPUT_DIM..(r + 1) * INPUT_DIM];
        let (gh, gw) = &cache.rows[r];
        let gi = &mut grad_in[r * INPUT_DIM..(r + 1) * INPUT_DIM];
        let mut dyh = [0.0; GRID];
        let mut dyw = [0.0; GRID];
        for h in 0..GRID {
            for w in 0..GRID {
                let i = h * GRID + w;
                gi[i] += g[i] * gh.gate[h] * gw.gate[w];
                dyh[h] += g[i] * row[i] * gw.gate[w];
                dyw[w] += g[i] * row[i] * gh.gate[h];
            }
        }
        let dzh = gate_backward(
            gh,
            p.conv_h.data(),
            p.norm_h_gain.data(),
            &dyh,
            GateGrads {
                kernel: grads.conv_h.data_mut(),
                bias: &mut grads.conv_h_bias.data_mut()[0],
                gain: grads.norm_h_gain.data_mut(),
                beta: grads.norm_h_bias.data_mut(),
            },
        );
        let dzw = gate_backward(
            gw,
            p.conv_w.data(),
            p.norm_w_gain.data(),
            &dyw,
            GateGrads {
                kernel: grads.conv_w.data_mut(),
                bias: &mut grads.conv_w_bias.data_mut()[0],
                gain: grads.norm_w_gain.data_mut(),
                beta: grads.norm_w_bias.data_mut(),
            },
        );
        for h in 0..GRID {
            for w in 0..GRID {
                gi[h * GRID + w] += (dzh[h] + dzw[w]) / GRID as f64;
            }
        }
    }
    grad_in
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructuralParams {
    pub heads: usize,
    pub head_dim: usize,
    /// `[heads·head_dim, 36]`
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `[36, heads·head_dim]`
    pub w_o: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

impl StructuralParams {
    pub fn zeros(heads: usize) -> Self {
        let inner = heads * HEAD_DIM;
        Self {
            heads,
            head_dim: HEAD_DIM,
            w_q: Tensor::zeros(&[inner, INPUT_DIM]),
            w_k: Tensor::zeros(&[inner, INPUT_DIM]),
            w_v: Tensor::zeros(&[inner, INPUT_DIM]),
            w_o: Tensor::zeros(&[INPUT_DIM, inner]),
            ln_gain: Tensor::full(&[INPUT_DIM], 1.0),
            ln_bias: Tensor::zeros(&[INPUT_DIM]),
        }
    }

    pub fn init<R: Rng>(heads: usize, rng: &mut R) -> Self {
        let inner = heads * HEAD_DIM;
        let b_in = 1.0 / (INPUT_DIM as f64).sqrt();
        let b_inner = 1.0 / (inner as f64).sqrt();
        Self {
            heads,
            head_dim: HEAD_DIM,
            w_q: Tensor::uniform(&[inner, INPUT_DIM], b_in, rng),
            w_k: Tensor::uniform(&[inner, INPUT_DIM], b_in, rng),
            w_v: Tensor::uniform(&[inner, INPUT_DIM], b_in, rng),
            w_o: Tensor::uniform(&[INPUT_DIM, inner], b_inner, rng),
            ln_gain: Tensor::full(&[INPUT_DIM], 1.0),
            ln_bias: Tensor::zeros(&[INPUT_DIM]),
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

impl Parameters for StructuralParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "w_q"), &self.w_q);
        f(join(prefix, "w_k"), &self.w_k);
        f(join(prefix, "w_v"), &self.w_v);
        f(join(prefix, "w_o"), &self.w_o);
        f(join(prefix, "ln_gain"), &self.ln_gain);
        f(join(prefix, "ln_bias"), &self.ln_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "w_q"), &mut self.w_q);
        f(join(prefix, "w_k"), &mut self.w_k);
        f(join(prefix, "w_v"), &mut self.w_v);
        f(join(prefix, "w_o"), &mut self.w_o);
        f(join(prefix, "ln_gain"), &mut self.ln_gain);
        f(join(prefix, "ln_bias"), &mut self.ln_bias);
    }
}

/// `a · bᵀ` for row-major `a: n×k`, `b: m×k`.
fn matmul_bt(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let br = &b[j * k..(j + 1) * k];
            out[i * m + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a · b` for row-major `a: n×k`, `b: k×m`.
fn matmul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let br = &b[l * m..(l + 1) * m];
            let or = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                or[j] += av * br[j];
            }
        }
    }
    out
}

/// `out += aᵀ · b` for row-major `a: n×p`, `b: n×q`; `out: p×q`.
fn add_matmul_at(out: &mut [f64], a: &[f64], n: usize, p: usize, b: &[f64], q: usize) {
    for r in 0..n {
        for i in 0..p {
            let av = a[r * p + i];
            if av == 0.0 {
                continue;
            }
            let br = &b[r * q..(r + 1) * q];
            let or = &mut out[i * q..(i + 1) * q];
            for j in 0..q {
                or[j] += av * br[j];
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct StructuralCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention weights, `[head][row][col]`.
    probs: Vec<f64>,
    concat: Vec<f64>,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

impl StructuralCache {
    /// Attention weights of head `h` as an `N×N` row-major block.
    pub fn attention_weights(&self, h: usize, rows: usize) -> &[f64] {
        &self.probs[h * rows * rows..(h + 1) * rows * rows]
    }
}

pub fn structural_forward(x: &[f64], rows: usize, p: &StructuralParams) -> (Vec<f64>, StructuralCache) {
    let inner = p.inner_dim();
    let dh = p.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = matmul_bt(x, rows, INPUT_DIM, p.w_q.data(), inner);
    let k = matmul_bt(x, rows, INPUT_DIM, p.w_k.data(), inner);
    let v = matmul_bt(x, rows, INPUT_DIM, p.w_v.data(), inner);
    let mut probs = vec![0.0; p.heads * rows * rows];
    let mut concat = vec![0.0; rows * inner];
    for h in 0..p.heads {
        let off = h * dh;
        let block = &mut probs[h * rows * rows..(h + 1) * rows * rows];
        for i in 0..rows {
            let qi = &q[i * inner + off..i * inner + off + dh];
            let pr = &mut block[i * rows..(i + 1) * rows];
            let mut max = f64::NEG_INFINITY;
            for j in 0..rows {
                let kj = &k[j * inner + off..j * inner + off + dh];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                pr[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for s in pr.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in pr.iter_mut() {
                *s /= sum;
            }
            let out = &mut concat[i * inner + off..i * inner + off + dh];
            for j in 0..rows {
                let w = pr[j];
                let vj = &v[j * inner + off..j * inner + off + dh];
                for d in 0..dh {
                    out[d] += w * vj[d];
                }
            }
        }
    }
    let projected = matmul_bt(&concat, rows, inner, p.w_o.data(), INPUT_DIM);
    let mut normalized = vec![0.0; rows * INPUT_DIM];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; rows * INPUT_DIM];
    for r in 0..rows {
        let range = r * INPUT_DIM..(r + 1) * INPUT_DIM;
        let y: Vec<f64> = projected[range.clone()].iter().zip(&x[range.clone()]).map(|(a, b)| a + b).collect();
        let mean = y.iter().sum::<f64>() / INPUT_DIM as f64;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / INPUT_DIM as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..INPUT_DIM {
            let n = (y[c] - mean) * is;
            normalized[r * INPUT_DIM + c] = n;
            out[r * INPUT_DIM + c] = p.ln_gain.data()[c] * n + p.ln_bias.data()[c];
        }
    }
    (
        out,
        StructuralCache {
            q,
            k,
            v,
            probs,
            concat,
            normalized,
            inv_std,
        },
    )
}

/// Multi-head attention over the rows, residual, LayerNorm.
pub fn structural_attention(x: &[f64], rows: usize, p: &StructuralParams) -> Vec<f64> {
    structural_forward(x, rows, p).0
}

pub fn structural_backward(
    x: &[f64],
    rows: usize,
    p: &StructuralParams,
    cache: &StructuralCache,
    grad_out: &[f64],
    grads: &mut StructuralParams,
) -> Vec<f64> {
    let inner = p.inner_dim();
    let dh = p.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    // LayerNorm
    let mut dy = vec![0.0; rows * INPUT_DIM];
    for r in 0..rows {
        let n = &cache.normalized[r * INPUT_DIM..(r + 1) * INPUT_DIM];
        let g = &grad_out[r * INPUT_DIM..(r + 1) * INPUT_DIM];
        let mut dn = [0.0; INPUT_DIM];
        for c in 0..INPUT_DIM {
            grads.ln_gain.data_mut()[c] += g[c] * n[c];
            grads.ln_bias.data_mut()[c] += g[c];
            dn[c] = g[c] * p.ln_gain.data()[c];
        }
        let mean_dn = dn.iter().sum::<f64>() / INPUT_DIM as f64;
        let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / INPUT_DIM as f64;
        for c in 0..INPUT_DIM {
            dy[r * INPUT_DIM + c] = cache.inv_std[r] * (dn[c] - mean_dn - n[c] * mean_dn_n);
        }
    }
    // Residual branch passes dy straight through; the projection gets it too.
    let mut dx = dy.clone();
    add_matmul_at(grads.w_o.data_mut(), &dy, rows, INPUT_DIM, &cache.concat, inner);
    let dconcat = matmul(&dy, rows, INPUT_DIM, p.w_o.data(), inner);

    let mut dq = vec![0.0; rows * inner];
    let mut dk = vec![0.0; rows * inner];
    let mut dv = vec![0.0; rows * inner];
    let mut dp = vec![0.0; rows];
    for h in 0..p.heads {
        let off = h * dh;
        let block = cache.attention_weights(h, rows);
        for i in 0..rows {
            let doi = &dconcat[i * inner + off..i * inner + off + dh];
            let pr = &block[i * rows..(i + 1) * rows];
            let mut dot = 0.0;
            for j in 0..rows {
                let vj = &cache.v[j * inner + off..j * inner + off + dh];
                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += dp[j] * pr[j];
                let dvj = &mut dv[j * inner + off..j * inner + off + dh];
                for d in 0..dh {
                    dvj[d] += pr[j] * doi[d];
                }
            }
            for j in 0..rows {
                let ds = pr[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for d in 0..dh {
                    dq[i * inner + off + d] += ds * cache.k[j * inner + off + d];
                    dk[j * inner + off + d] += ds * cache.q[i * inner + off + d];
                }
            }
        }
    }
    for (dproj, w, gw) in [
        (&dq, &p.w_q, &mut grads.w_q),
        (&dk, &p.w_k, &mut grads.w_k),
        (&dv, &p.w_v, &mut grads.w_v),
    ] {
        add_matmul_at(gw.data_mut(), dproj, rows, inner, x, INPUT_DIM);
        let back = matmul(dproj, rows, inner, w.data(), INPUT_DIM);
        for (a, b) in dx.iter_mut().zip(&back) {
            *a += b;
        }
    }
    dx
}

/// Granular then structural attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Hgsa {
    pub granular: GranularParams,
    pub structural: StructuralParams,
}

#[derive(Clone, Debug)]
pub struct HgsaCache {
    granular_out: Vec<f64>,
    granular: GranularCache,
    structural: StructuralCache,
}

impl Hgsa {
    pub fn init<R: Rng>(heads: usize, rng: &mut R) -> Self {
        Self {
            granular: GranularParams::init(rng),
            structural: StructuralParams::init(heads, rng),
        }
    }

    pub fn forward(&self, f_in: &[f64], rows: usize) -> (Vec<f64>, HgsaCache) {
        let (granular_out, granular) = granular_forward(f_in, rows, &self.granular);
        let (out, structural) = structural_forward(&granular_out, rows, &self.structural);
        (
            out,
            HgsaCache {
                granular_out,
                granular,
                structural,
            },
        )
    }

    pub fn backward(&self, f_in: &[f64], rows: usize, cache: &HgsaCache, grad_out: &[f64], grads: &mut Hgsa) -> Vec<f64> {
        let dgra = structural_backward(
            &cache.granular_out,
            rows,
            &self.structural,
            &cache.structural,
            grad_out,
            &mut grads.structural,
        );
        granular_backward(f_in, rows, &self.granular, &cache.granular, &dgra, &mut grads.granular)
    }
}

impl Parameters for Hgsa {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.granular.visit(&join(prefix, "granular"), f);
        self.structural.visit(&join(prefix, "structural"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.granular.visit_mut(&join(prefix, "granular"), f);
        self.structural.visit_mut(&join(prefix, "structural"), f);
    }
}

/// Linear map to `3k` logits followed by a sigmoid: one RGB per Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorHead {
    pub linear: Linear,
}

impl ColorHead {
    pub fn zeros(n_in: usize, k: usize) -> Self {
        Self {
            linear: Linear::zeros(n_in, 3 * k),
        }
    }

    pub fn init<R: Rng>(n_in: usize, k: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::uniform(n_in, 3 * k, rng),
        }
    }

    /// Row `i` holds `k` consecutive RGB triples.
    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        self.linear.forward(x, rows).into_iter().map(sigmoid).collect()
    }

    pub fn backward(&self, x: &[f64], rows: usize, colors: &[f64], grad: &[f64], grads: &mut ColorHead) -> Vec<f64> {
        let dz: Vec<f64> = colors.iter().zip(grad).map(|(c, g)| g * c * (1.0 - c)).collect();
        self.linear.backward(x, rows, &dz, &mut grads.linear)
    }
}

impl Parameters for ColorHead {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.linear.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.linear.visit_mut(prefix, f);
    }
}

/// `color_head` as a free function: `N×36 -> N×k` RGB triples in `(0, 1)`.
pub fn color_head(f_hgsa: &[f64], rows: usize, head: &ColorHead) -> Vec<f64> {
    head.forward(f_hgsa, rows)
}
