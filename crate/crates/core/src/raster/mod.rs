//! EWA projection and tile-based front-to-back compositing.

mod image;

pub use image::ImageBuffer;

use crate::scene::{Camera, Mat3, NeuralGaussian, Vec3};
use nalgebra::{Matrix2, Matrix2x3};
use rayon::prelude::*;

pub const NEAR_PLANE: f64 = 0.01;
pub const LOW_PASS: f64 = 0.3;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const TILE: usize = 16;
/// Squared Mahalanobis radius at which the 2D Gaussian falls to 1e-4.
pub const CUTOFF: f64 = 18.420_680_743_952_367;

/// A Gaussian projected to the image plane. Pixel centers sit at
/// `(x + 0.5, y + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat {
    pub mean: [f64; 2],
    /// `(Σ'₀₀, Σ'₀₁, Σ'₁₁)`.
    pub cov: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Gradient of a loss w.r.t. one splat.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub mean: [f64; 2],
    pub cov: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.cov[i] += o.cov[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
    }
}

fn jacobian(p: &Vec3, camera: &Camera) -> Matrix2x3<f64> {
    let z = p.z;
    Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * p.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * p.y / (z * z),
    )
}

/// Projects without frame culling; `None` only in front of the near plane.
pub fn project_unculled(g: &NeuralGaussian, camera: &Camera) -> Option<Splat> {
    let p = camera.world_to_camera(&g.mean);
    if !(p.z > NEAR_PLANE) {
        return None;
    }
    let t = jacobian(&p, camera) * camera.rotation;
    let s = t * g.covariance * t.transpose();
    Some(Splat {
        mean: [camera.fx * p.x / p.z + camera.cx, camera.fy * p.y / p.z + camera.cy],
        cov: [s[(0, 0)] + LOW_PASS, 0.5 * (s[(0, 1)] + s[(1, 0)]), s[(1, 1)] + LOW_PASS],
        depth: p.z,
        opacity: g.opacity,
        color: g.color,
    })
}

/// EWA projection; `None` when behind the near plane or outside the frame.
pub fn project(g: &NeuralGaussian, camera: &Camera) -> Option<Splat> {
    project_unculled(g, camera).filter(|s| overlaps_frame(s, camera.width, camera.height))
}

fn half_extent(s: &Splat) -> [f64; 2] {
    [(CUTOFF * s.cov[0]).sqrt() + 1.0, (CUTOFF * s.cov[2]).sqrt() + 1.0]
}

/// Inclusive pixel range `[x0, x1] × [y0, y1]` possibly touched by `s`.
fn pixel_bounds(s: &Splat, width: usize, height: usize) -> Option<[usize; 4]> {
    let r = half_extent(s);
    let x0 = (s.mean[0] - r[0] - 0.5).ceil().max(0.0);
    let y0 = (s.mean[1] - r[1] - 0.5).ceil().max(0.0);
    let x1 = (s.mean[0] + r[0] - 0.5).floor().min(width as f64 - 1.0);
    let y1 = (s.mean[1] + r[1] - 0.5).floor().min(height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some([x0 as usize, x1 as usize, y0 as usize, y1 as usize])
}

pub fn overlaps_frame(s: &Splat, width: usize, height: usize) -> bool {
    pixel_bounds(s, width, height).is_some()
}

/// Gradient of the projection w.r.t. the 3D mean and covariance.
pub fn project_backward(g: &NeuralGaussian, camera: &Camera, grad: &SplatGrad) -> (Vec3, Mat3) {
    let p = camera.world_to_camera(&g.mean);
    let (fx, fy) = (camera.fx, camera.fy);
    let z = p.z;
    let j = jacobian(&p, camera);
    let t = j * camera.rotation;
    let gc = Matrix2::new(grad.cov[0], 0.5 * grad.cov[1], 0.5 * grad.cov[1], grad.cov[2]);
    let d_sigma = t.transpose() * gc * t;
    let d_t = (gc + gc.transpose()) * t * g.covariance;
    let d_j = d_t * camera.rotation.transpose();

    let (gu, gv) = (grad.mean[0], grad.mean[1]);
    let mut dp = Vec3::new(gu * fx / z, gv * fy / z, -gu * fx * p.x / (z * z) - gv * fy * p.y / (z * z));
    dp.z += -d_j[(0, 0)] * fx / (z * z) - d_j[(1, 1)] * fy / (z * z);
    dp.x += -d_j[(0, 2)] * fx / (z * z);
    dp.y += -d_j[(1, 2)] * fy / (z * z);
    dp.z += 2.0 * d_j[(0, 2)] * fx * p.x / (z * z * z) + 2.0 * d_j[(1, 2)] * fy * p.y / (z * z * z);
    (camera.rotation.transpose() * dp, d_sigma)
}

/// Indices of `splats` in compositing order: depth ascending, ties by index.
pub fn depth_order(splats: &[Splat]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| splats[a].depth.total_cmp(&splats[b].depth));
    order
}

#[derive(Clone, Debug)]
struct Prepared {
    index: usize,
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

fn prepare(splats: &[Splat]) -> Vec<Prepared> {
    depth_order(splats)
        .into_iter()
        .map(|i| {
            let s = &splats[i];
            let det = s.cov[0] * s.cov[2] - s.cov[1] * s.cov[1];
            Prepared {
                index: i,
                mean: s.mean,
                conic: [s.cov[2] / det, -s.cov[1] / det, s.cov[0] / det],
                opacity: s.opacity.max(0.0),
                color: s.color,
            }
        })
        .collect()
}

/// Compositing state of one pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelState {
    /// Color before clamping to `[0, 1]`.
    pub color: [f64; 3],
    pub transmittance: f64,
    /// `Σ αᵢ G'ᵢ Tᵢ`.
    pub weight: f64,
    pub count: usize,
}

/// The 2D Gaussian at a pixel center, zero beyond the cutoff radius.
fn falloff(p: &Prepared, px: f64, py: f64) -> Option<(f64, [f64; 2])> {
    let d = [px - p.mean[0], py - p.mean[1]];
    let q = p.conic[0] * d[0] * d[0] + 2.0 * p.conic[1] * d[0] * d[1] + p.conic[2] * d[1] * d[1];
    if !(q <= CUTOFF) {
        return None;
    }
    Some(((-0.5 * q).exp(), d))
}

fn composite<'a>(list: impl Iterator<Item = &'a Prepared>, px: f64, py: f64, background: [f64; 3]) -> PixelState {
    let mut color = [0.0; 3];
    let mut t = 1.0;
    let mut weight = 0.0;
    let mut count = 0;
    for p in list {
        let Some((g, _)) = falloff(p, px, py) else { continue };
        let a = p.opacity * g;
        if a <= 0.0 {
            continue;
        }
        let w = a * t;
        for c in 0..3 {
            color[c] += p.color[c] * w;
        }
        weight += w;
        count += 1;
        t *= 1.0 - a;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    for c in 0..3 {
        color[c] += t * background[c];
    }
    PixelState {
        color,
        transmittance: t,
        weight,
        count,
    }
}

/// Per-pixel loop over every splat; the reference the tiled path must match.
pub fn rasterize_naive(splats: &[Splat], width: usize, height: usize, background: [f64; 3]) -> ImageBuffer {
    let prepared = prepare(splats);
    let mut img = ImageBuffer::new(width, height);
    let mut trans = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let s = composite(prepared.iter(), x as f64 + 0.5, y as f64 + 0.5, background);
            img.set_pixel(x, y, s.color.map(|v| v.clamp(0.0, 1.0)));
            trans[y * width + x] = s.transmittance;
        }
    }
    img.transmittance = Some(trans);
    img
}

/// Compositing state of pixel `(x, y)` computed with the naive loop.
pub fn pixel_state(splats: &[Splat], x: usize, y: usize, background: [f64; 3]) -> PixelState {
    composite(prepare(splats).iter(), x as f64 + 0.5, y as f64 + 0.5, background)
}

struct Tile {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    /// Indices into the prepared list, in depth order.
    list: Vec<usize>,
}

fn bin(prepared: &[Prepared], splats: &[Splat], width: usize, height: usize) -> Vec<Tile> {
    let (tw, th) = (width.div_ceil(TILE), height.div_ceil(TILE));
    let mut tiles: Vec<Tile> = (0..th)
        .flat_map(|ty| {
            (0..tw).map(move |tx| Tile {
                x0: tx * TILE,
                x1: ((tx + 1) * TILE).min(width),
                y0: ty * TILE,
                y1: ((ty + 1) * TILE).min(height),
                list: Vec::new(),
            })
        })
        .collect();
    for (k, p) in prepared.iter().enumerate() {
        let Some([x0, x1, y0, y1]) = pixel_bounds(&splats[p.index], width, height) else { continue };
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                tiles[ty * tw + tx].list.push(k);
            }
        }
    }
    tiles
}

/// Tile-binned rasterizer. Output is bit-identical to [`rasterize_naive`].
pub fn rasterize(splats: &[Splat], width: usize, height: usize, background: [f64; 3]) -> ImageBuffer {
    let prepared = prepare(splats);
    let tiles = bin(&prepared, splats, width, height);
    let results: Vec<Vec<PixelState>> = tiles
        .par_iter()
        .map(|tile| {
            let mut out = Vec::with_capacity((tile.x1 - tile.x0) * (tile.y1 - tile.y0));
            for y in tile.y0..tile.y1 {
                for x in tile.x0..tile.x1 {
                    let list = tile.list.iter().map(|&k| &prepared[k]);
                    out.push(composite(list, x as f64 + 0.5, y as f64 + 0.5, background));
                }
            }
            out
        })
        .collect();
    let mut img = ImageBuffer::new(width, height);
    let mut trans = vec![0.0; width * height];
    for (tile, states) in tiles.iter().zip(results) {
        let mut it = states.into_iter();
        for y in tile.y0..tile.y1 {
            for x in tile.x0..tile.x1 {
                let s = it.next().unwrap();
                img.set_pixel(x, y, s.color.map(|v| v.clamp(0.0, 1.0)));
                trans[y * width + x] = s.transmittance;
            }
        }
    }
    img.transmittance = Some(trans);
    img
}

/// Gradients of a loss w.r.t. every splat, given `dL/dC` for the rendered
/// image (row-major RGB). Splats past early termination get zero gradient.
pub fn rasterize_backward(
    splats: &[Splat],
    width: usize,
    height: usize,
    background: [f64; 3],
    grad_image: &[f64],
) -> Vec<SplatGrad> {
    assert_eq!(grad_image.len(), width * height * 3);
    let prepared = prepare(splats);
    let tiles = bin(&prepared, splats, width, height);
    let partials: Vec<Vec<(usize, SplatGrad, [f64; 3])>> = tiles
        .par_iter()
        .map(|tile| tile_backward(tile, &prepared, width, background, grad_image))
        .collect();
    let mut grads = vec![SplatGrad::default(); splats.len()];
    let mut d_conic = vec![[0.0; 3]; splats.len()];
    for part in partials {
        for (k, g, dm) in part {
            let idx = prepared[k].index;
            grads[idx].add(&g);
            for i in 0..3 {
                d_conic[idx][i] += dm[i];
            }
        }
    }
    for p in &prepared {
        let m = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
        let dm = d_conic[p.index];
        let dm = Matrix2::new(dm[0], dm[1], dm[1], dm[2]);
        let ds = -(m * dm * m);
        grads[p.index].cov = [ds[(0, 0)], ds[(0, 1)] + ds[(1, 0)], ds[(1, 1)]];
    }
    grads
}

struct Contribution {
    slot: usize,
    g: f64,
    a: f64,
    t: f64,
    d: [f64; 2],
}

/// Per-tile partial gradients: `(prepared index, grad, dL/dconic)` where the
/// conic gradient is per matrix entry `(∂₀₀, ∂₀₁ = ∂₁₀, ∂₁₁)`.
fn tile_backward(
    tile: &Tile,
    prepared: &[Prepared],
    width: usize,
    background: [f64; 3],
    grad_image: &[f64],
) -> Vec<(usize, SplatGrad, [f64; 3])> {
    let mut acc = vec![(SplatGrad::default(), [0.0; 3]); tile.list.len()];
    let mut contribs = Vec::new();
    for y in tile.y0..tile.y1 {
        for x in tile.x0..tile.x1 {
            let gi = (y * width + x) * 3;
            let upstream = &grad_image[gi..gi + 3];
            if upstream.iter().all(|v| *v == 0.0) {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            contribs.clear();
            let mut color = [0.0; 3];
            let mut t = 1.0;
            for (slot, &k) in tile.list.iter().enumerate() {
                let p = &prepared[k];
                let Some((g, d)) = falloff(p, px, py) else { continue };
                let a = p.opacity * g;
                if a <= 0.0 {
                    continue;
                }
                for c in 0..3 {
                    color[c] += p.color[c] * a * t;
                }
                contribs.push(Contribution { slot, g, a, t, d });
                t *= 1.0 - a;
                if t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            let mut gc = [0.0; 3];
            for c in 0..3 {
                let v = color[c] + t * background[c];
                if (0.0..=1.0).contains(&v) {
                    gc[c] = upstream[c];
                }
            }
            let mut suffix = background;
            for r in contribs.iter().rev() {
                let p = &prepared[tile.list[r.slot]];
                let (grad, dm) = &mut acc[r.slot];
                let mut da = 0.0;
                for c in 0..3 {
                    grad.color[c] += gc[c] * r.a * r.t;
                    da += gc[c] * r.t * (p.color[c] - suffix[c]);
                    suffix[c] = p.color[c] * r.a + (1.0 - r.a) * suffix[c];
                }
                grad.opacity += da * r.g;
                let dq = -0.5 * da * p.opacity * r.g;
                let md = [
                    p.conic[0] * r.d[0] + p.conic[1] * r.d[1],
                    p.conic[1] * r.d[0] + p.conic[2] * r.d[1],
                ];
                grad.mean[0] -= 2.0 * dq * md[0];
                grad.mean[1] -= 2.0 * dq * md[1];
                dm[0] += dq * r.d[0] * r.d[0];
                dm[1] += dq * r.d[0] * r.d[1];
                dm[2] += dq * r.d[1] * r.d[1];
            }
        }
    }
    tile.list
        .iter()
        .zip(acc)
        .filter(|(_, (g, dm))| *g != SplatGrad::default() || *dm != [0.0; 3])
        .map(|(&k, (g, dm))| (k, g, dm))
        .collect()
}
