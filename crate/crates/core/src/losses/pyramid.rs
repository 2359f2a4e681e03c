//! Laplacian pyramid and the normalized pyramid distance.

use crate::error::{Error, Result};

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
const BINOMIAL2: [f64; 5] = [2.0 / 16.0, 8.0 / 16.0, 12.0 / 16.0, 8.0 / 16.0, 2.0 / 16.0];
const BOX: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];

/// Single-channel row-major image.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0.0; width * height])
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Mirror index without edge repetition; `n == 1` maps everything to 0.
pub(crate) fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable reflect-padded correlation with an odd kernel along one axis,
/// or its adjoint when `transpose` is set.
fn filter_axis(p: &Plane, kernel: &[f64], horizontal: bool, transpose: bool) -> Plane {
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (p.width, p.height);
    let mut out = Plane::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let v = p.data[y * w + x];
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let off = t as isize - r;
                let src = if horizontal {
                    y * w + reflect(x as isize + off, w)
                } else {
                    reflect(y as isize + off, h) * w + x
                };
                if transpose {
                    out.data[src] += k * v;
                } else {
                    acc += k * p.data[src];
                }
            }
            if !transpose {
                out.data[y * w + x] = acc;
            }
        }
    }
    out
}

fn filter(p: &Plane, kernel: &[f64], transpose: bool) -> Plane {
    filter_axis(&filter_axis(p, kernel, true, transpose), kernel, false, transpose)
}

fn downsample(p: &Plane) -> Plane {
    let b = filter(p, &BINOMIAL, false);
    let (w, h) = (p.width.div_ceil(2), p.height.div_ceil(2));
    let mut out = Plane::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            out.data[y * w + x] = b.get(2 * x, 2 * y);
        }
    }
    out
}

fn downsample_adjoint(g: &Plane, width: usize, height: usize) -> Plane {
    let mut z = Plane::zeros(width, height);
    for y in 0..g.height {
        for x in 0..g.width {
            z.data[2 * y * width + 2 * x] = g.get(x, y);
        }
    }
    filter(&z, &BINOMIAL, true)
}

fn upsample(p: &Plane, width: usize, height: usize) -> Plane {
    let mut z = Plane::zeros(width, height);
    for y in 0..p.height {
        for x in 0..p.width {
            z.data[2 * y * width + 2 * x] = p.get(x, y);
        }
    }
    filter(&z, &BINOMIAL2, false)
}

fn upsample_adjoint(g: &Plane, width: usize, height: usize) -> Plane {
    let b = filter(g, &BINOMIAL2, true);
    let mut out = Plane::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            out.data[y * width + x] = b.get(2 * x, 2 * y);
        }
    }
    out
}

/// Residual bands `R_1..R_{k-1}` followed by the lowpass `R_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianPyramid {
    pub bands: Vec<Plane>,
}

impl LaplacianPyramid {
    pub fn scales(&self) -> usize {
        self.bands.len()
    }

    pub fn collapse(&self) -> Plane {
        let mut bands = self.bands.iter().rev();
        let mut level = bands.next().expect("empty pyramid").clone();
        for r in bands {
            let up = upsample(&level, r.width, r.height);
            level = Plane::new(r.width, r.height, r.data.iter().zip(&up.data).map(|(a, b)| a + b).collect());
        }
        level
    }
}

/// Default scale count `min(5, ⌊log2 min(w, h)⌋)`, at least 1.
pub fn default_scales(width: usize, height: usize) -> usize {
    let m = width.min(height).max(1);
    (usize::BITS - 1 - m.leading_zeros()).clamp(1, 5) as usize
}

pub fn build_pyramid(img: &Plane, k: usize) -> Result<LaplacianPyramid> {
    if k == 0 {
        return Err(Error::InvalidConfigValue {
            key: "scales".into(),
            message: "pyramid needs at least one scale".into(),
        });
    }
    if img.width.min(img.height) < 1 << (k - 1) {
        return Err(Error::ImageTooSmall(format!(
            "{}x{} image cannot hold {k} pyramid scales",
            img.width, img.height
        )));
    }
    let mut levels = vec![img.clone()];
    for _ in 1..k {
        let next = downsample(levels.last().unwrap());
        levels.push(next);
    }
    let mut bands = Vec::with_capacity(k);
    for i in 0..k - 1 {
        let up = upsample(&levels[i + 1], levels[i].width, levels[i].height);
        bands.push(Plane::new(
            levels[i].width,
            levels[i].height,
            levels[i].data.iter().zip(&up.data).map(|(a, b)| a - b).collect(),
        ));
    }
    bands.push(levels.pop().unwrap());
    Ok(LaplacianPyramid { bands })
}

/// Gradient w.r.t. the source image given gradients w.r.t. every band.
pub fn pyramid_adjoint(grads: &[Plane]) -> Plane {
    let k = grads.len();
    let mut g = grads[k - 1].clone();
    if k > 1 {
        let up = upsample_adjoint(&grads[k - 2], g.width, g.height);
        sub_assign(&mut g, &up);
    }
    for i in (0..k - 1).rev() {
        let mut gi = grads[i].clone();
        let down = downsample_adjoint(&g, gi.width, gi.height);
        add_assign(&mut gi, &down);
        if i > 0 {
            let up = upsample_adjoint(&grads[i - 1], gi.width, gi.height);
            sub_assign(&mut gi, &up);
        }
        g = gi;
    }
    g
}

fn add_assign(a: &mut Plane, b: &Plane) {
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
}

fn sub_assign(a: &mut Plane, b: &Plane) {
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x -= y);
}

/// Divisive-normalization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NlpdParams {
    /// Noise level per scale; the last entry repeats for deeper scales.
    pub sigmas: Vec<f64>,
}

impl Default for NlpdParams {
    fn default() -> Self {
        Self { sigmas: vec![0.1] }
    }
}

impl NlpdParams {
    pub fn sigma(&self, scale: usize) -> f64 {
        self.sigmas[scale.min(self.sigmas.len() - 1)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidConfigValue {
                key: "nlpd_sigma".into(),
                message: "noise levels must be positive".into(),
            });
        }
        Ok(())
    }
}

/// `R / (σ + F(|R|))` with `F` the 3×3 box filter.
pub fn normalize_band(r: &Plane, sigma: f64) -> Plane {
    let abs = Plane::new(r.width, r.height, r.data.iter().map(|v| v.abs()).collect());
    let f = filter(&abs, &BOX, false);
    Plane::new(r.width, r.height, r.data.iter().zip(&f.data).map(|(v, m)| v / (sigma + m)).collect())
}

fn normalize_band_backward(r: &Plane, sigma: f64, grad: &[f64]) -> Plane {
    let abs = Plane::new(r.width, r.height, r.data.iter().map(|v| v.abs()).collect());
    let f = filter(&abs, &BOX, false);
    let mut g = Plane::zeros(r.width, r.height);
    let mut g_den = Plane::zeros(r.width, r.height);
    for i in 0..r.data.len() {
        let z = sigma + f.data[i];
        g.data[i] = grad[i] / z;
        g_den.data[i] = -grad[i] * r.data[i] / (z * z);
    }
    let g_abs = filter(&g_den, &BOX, true);
    for i in 0..r.data.len() {
        if r.data[i] != 0.0 {
            g.data[i] += r.data[i].signum() * g_abs.data[i];
        }
    }
    g
}

/// Per-scale distances `D_i` between two planes.
fn plane_distances(x: &Plane, y: &Plane, params: &NlpdParams, k: usize) -> Result<(Vec<f64>, LaplacianPyramid, Vec<Plane>)> {
    let px = build_pyramid(x, k)?;
    let py = build_pyramid(y, k)?;
    let mut d = Vec::with_capacity(k);
    let mut diffs = Vec::with_capacity(k);
    for i in 0..k {
        let nx = normalize_band(&px.bands[i], params.sigma(i));
        let ny = normalize_band(&py.bands[i], params.sigma(i));
        let diff = Plane::new(nx.width, nx.height, nx.data.iter().zip(&ny.data).map(|(a, b)| a - b).collect());
        let n = diff.data.len() as f64;
        d.push((diff.data.iter().map(|v| v * v).sum::<f64>() / n).sqrt());
        diffs.push(diff);
    }
    Ok((d, px, diffs))
}

/// Distance between two planes, and its gradient w.r.t. `x`.
pub fn plane_nlpd(x: &Plane, y: &Plane, params: &NlpdParams, k: usize, want_grad: bool) -> Result<(f64, Option<Plane>)> {
    params.validate()?;
    let (d, px, diffs) = plane_distances(x, y, params, k)?;
    let value = d.iter().sum::<f64>() / k as f64;
    if !want_grad {
        return Ok((value, None));
    }
    let band_grads: Vec<Plane> = (0..k)
        .map(|i| {
            let diff = &diffs[i];
            let n = diff.data.len() as f64;
            let gn: Vec<f64> = if d[i] > 0.0 {
                diff.data.iter().map(|e| e / (n * d[i] * k as f64)).collect()
            } else {
                vec![0.0; diff.data.len()]
            };
            normalize_band_backward(&px.bands[i], params.sigma(i), &gn)
        })
        .collect();
    Ok((value, Some(pyramid_adjoint(&band_grads))))
}
