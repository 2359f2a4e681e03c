//! Windowed structural similarity with a zero-padded Gaussian window.

use super::pyramid::Plane;
use crate::error::Result;
use crate::raster::ImageBuffer;

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian window.
pub fn window() -> [f64; WINDOW] {
    let r = (WINDOW / 2) as f64;
    let mut k = [0.0; WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Zero-padded separable blur. The window is symmetric, so this is self-adjoint.
fn blur(p: &Plane, k: &[f64; WINDOW]) -> Plane {
    let r = (WINDOW / 2) as isize;
    let (w, h) = (p.width as isize, p.height as isize);
    let mut tmp = Plane::zeros(p.width, p.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let sx = x + t as isize - r;
                if sx >= 0 && sx < w {
                    acc += kv * p.data[(y * w + sx) as usize];
                }
            }
            tmp.data[(y * w + x) as usize] = acc;
        }
    }
    let mut out = Plane::zeros(p.width, p.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let sy = y + t as isize - r;
                if sy >= 0 && sy < h {
                    acc += kv * tmp.data[(sy * w + x) as usize];
                }
            }
            out.data[(y * w + x) as usize] = acc;
        }
    }
    out
}

fn product(a: &Plane, b: &Plane) -> Plane {
    Plane::new(a.width, a.height, a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect())
}

/// Mean SSIM over pixels and channels, with the gradient w.r.t. `render`
/// when requested.
pub(crate) fn ssim_impl(render: &ImageBuffer, gt: &ImageBuffer, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    render.same_shape(gt)?;
    let (w, h) = (render.width, render.height);
    let n = (w * h) as f64;
    let k = window();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; w * h * 3]);
    for c in 0..3 {
        let x = Plane::new(w, h, render.channel(c));
        let y = Plane::new(w, h, gt.channel(c));
        let mx = blur(&x, &k);
        let my = blur(&y, &k);
        let exx = blur(&product(&x, &x), &k);
        let eyy = blur(&product(&y, &y), &k);
        let exy = blur(&product(&x, &y), &k);
        let mut gm = Plane::zeros(w, h);
        let mut gxx = Plane::zeros(w, h);
        let mut gxy = Plane::zeros(w, h);
        let scale = 1.0 / (3.0 * n);
        for i in 0..w * h {
            let (ux, uy) = (mx.data[i], my.data[i]);
            let a1 = 2.0 * ux * uy + C1;
            let a2 = 2.0 * (exy.data[i] - ux * uy) + C2;
            let b1 = ux * ux + uy * uy + C1;
            let b2 = (exx.data[i] - ux * ux) + (eyy.data[i] - uy * uy) + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let ds = s * scale;
                gm.data[i] = ds * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
                gxy.data[i] = ds * 2.0 / a2;
                gxx.data[i] = -ds / b2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let (bm, bxx, bxy) = (blur(&gm, &k), blur(&gxx, &k), blur(&gxy, &k));
            for i in 0..w * h {
                g[i * 3 + c] = bm.data[i] + 2.0 * x.data[i] * bxx.data[i] + y.data[i] * bxy.data[i];
            }
        }
    }
    Ok((total / (3.0 * n), grad))
}

pub fn ssim(render: &ImageBuffer, gt: &ImageBuffer) -> Result<f64> {
    Ok(ssim_impl(render, gt, false)?.0)
}

/// `(1 − SSIM) / 2`.
pub fn dssim_loss(render: &ImageBuffer, gt: &ImageBuffer) -> Result<f64> {
    Ok((1.0 - ssim(render, gt)?) / 2.0)
}

pub fn dssim_loss_grad(render: &ImageBuffer, gt: &ImageBuffer) -> Result<(f64, Vec<f64>)> {
    let (s, g) = ssim_impl(render, gt, true)?;
    Ok(((1.0 - s) / 2.0, g.unwrap().into_iter().map(|v| -0.5 * v).collect()))
}
