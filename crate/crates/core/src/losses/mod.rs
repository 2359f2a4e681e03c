//! Training objective and image-quality metrics. Every `*_grad` function
//! returns the value together with its gradient w.r.t. the rendered image,
//! laid out like [`ImageBuffer::data`].

mod pyramid;
mod ssim;

pub use pyramid::{build_pyramid, default_scales, normalize_band, pyramid_adjoint, LaplacianPyramid, NlpdParams, Plane};
pub use ssim::{dssim_loss, dssim_loss_grad, ssim, window, C1, C2, WINDOW, WINDOW_SIGMA};

use crate::error::{Error, Result};
use crate::raster::ImageBuffer;
use crate::scene::Vec3;

/// Mixing weights of the total objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub dssim: f64,
    pub vol: f64,
    pub nlpd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dssim: 0.2,
            vol: 0.01,
            nlpd: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("lambda_dssim", self.dssim), ("lambda_vol", self.vol), ("lambda_nlpd", self.nlpd)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfigValue {
                    key: key.into(),
                    message: format!("{v} is outside [0, 1]"),
                });
            }
        }
        if self.nlpd >= 1.0 {
            return Err(Error::InvalidConfigValue {
                key: "lambda_nlpd".into(),
                message: "must be below 1".into(),
            });
        }
        Ok(())
    }
}

/// Pixel reconstruction term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reconstruction {
    #[default]
    L2,
    L1,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub reconstruction: Reconstruction,
    pub nlpd: NlpdParams,
    /// Pyramid depth; `None` picks [`default_scales`].
    pub scales: Option<usize>,
}

pub fn l2_loss(render: &ImageBuffer, gt: &ImageBuffer) -> Result<f64> {
    Ok(l2_loss_grad(render, gt)?.0)
}

pub fn l2_loss_grad(render: &ImageBuffer, gt: &ImageBuffer) -> Result<(f64, Vec<f64>)> {
    render.same_shape(gt)?;
    let n = render.data.len() as f64;
    let mut sum = 0.0;
    let grad = render
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| {
            sum += (a - b) * (a - b);
            2.0 * (a - b) / n
        })
        .collect();
    Ok((sum / n, grad))
}

pub fn l1_loss(render: &ImageBuffer, gt: &ImageBuffer) -> Result<f64> {
    Ok(l1_loss_grad(render, gt)?.0)
}

pub fn l1_loss_grad(render: &ImageBuffer, gt: &ImageBuffer) -> Result<(f64, Vec<f64>)> {
    render.same_shape(gt)?;
    let n = render.data.len() as f64;
    let mut sum = 0.0;
    let grad = render
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| {
            sum += (a - b).abs();
            if a == b {
                0.0
            } else {
                (a - b).signum() / n
            }
        })
        .collect();
    Ok((sum / n, grad))
}

/// `Σᵢ sᵢ₁ sᵢ₂ sᵢ₃`.
pub fn volume_loss(scales: &[Vec3]) -> f64 {
    scales.iter().map(|s| s.x * s.y * s.z).sum()
}

pub fn volume_loss_grad(scales: &[Vec3]) -> Vec<Vec3> {
    scales.iter().map(|s| Vec3::new(s.y * s.z, s.x * s.z, s.x * s.y)).collect()
}

fn nlpd_impl(render: &ImageBuffer, gt: &ImageBuffer, params: &NlpdParams, k: usize, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    render.same_shape(gt)?;
    let (w, h) = (render.width, render.height);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; w * h * 3]);
    for c in 0..3 {
        let x = Plane::new(w, h, render.channel(c));
        let y = Plane::new(w, h, gt.channel(c));
        let (v, g) = pyramid::plane_nlpd(&x, &y, params, k, want_grad)?;
        total += v / 3.0;
        if let (Some(out), Some(g)) = (grad.as_mut(), g) {
            for (i, gv) in g.data.iter().enumerate() {
                out[i * 3 + c] = gv / 3.0;
            }
        }
    }
    Ok((total, grad))
}

/// Normalized Laplacian pyramid distance over `k` scales, averaged over RGB.
pub fn nlpd_loss(render: &ImageBuffer, gt: &ImageBuffer, params: &NlpdParams, k: usize) -> Result<f64> {
    Ok(nlpd_impl(render, gt, params, k, false)?.0)
}

pub fn nlpd_loss_grad(render: &ImageBuffer, gt: &ImageBuffer, params: &NlpdParams, k: usize) -> Result<(f64, Vec<f64>)> {
    let (v, g) = nlpd_impl(render, gt, params, k, true)?;
    Ok((v, g.unwrap()))
}

/// Component values of the total objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// L2 or L1, per [`Reconstruction`].
    pub recon: f64,
    pub dssim: f64,
    pub vol: f64,
    pub nlpd: f64,
}

impl LossBreakdown {
    /// `((1 − λd)·recon + λd·dssim + λv·vol)·(1 − λn) + λn·nlpd`.
    pub fn combine(recon: f64, dssim: f64, vol: f64, nlpd: f64, w: &LossWeights) -> Self {
        Self {
            total: ((1.0 - w.dssim) * recon + w.dssim * dssim + w.vol * vol) * (1.0 - w.nlpd) + w.nlpd * nlpd,
            recon,
            dssim,
            vol,
            nlpd,
        }
    }

    /// The objective without the pyramid term.
    pub fn base(&self, w: &LossWeights) -> f64 {
        (1.0 - w.dssim) * self.recon + w.dssim * self.dssim + w.vol * self.vol
    }
}

/// Gradients of the total objective.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub image: Vec<f64>,
    pub scales: Vec<Vec3>,
}

pub fn total_loss(render: &ImageBuffer, gt: &ImageBuffer, scales: &[Vec3], cfg: &LossConfig) -> Result<LossBreakdown> {
    let k = cfg.scales.unwrap_or_else(|| default_scales(render.width, render.height));
    let recon = match cfg.reconstruction {
        Reconstruction::L2 => l2_loss(render, gt)?,
        Reconstruction::L1 => l1_loss(render, gt)?,
    };
    Ok(LossBreakdown::combine(
        recon,
        dssim_loss(render, gt)?,
        volume_loss(scales),
        nlpd_loss(render, gt, &cfg.nlpd, k)?,
        &cfg.weights,
    ))
}

pub fn total_loss_grad(render: &ImageBuffer, gt: &ImageBuffer, scales: &[Vec3], cfg: &LossConfig) -> Result<(LossBreakdown, LossGrad)> {
    let w = &cfg.weights;
    let k = cfg.scales.unwrap_or_else(|| default_scales(render.width, render.height));
    let (recon, g_recon) = match cfg.reconstruction {
        Reconstruction::L2 => l2_loss_grad(render, gt)?,
        Reconstruction::L1 => l1_loss_grad(render, gt)?,
    };
    let (dssim, g_dssim) = dssim_loss_grad(render, gt)?;
    let (nlpd, g_nlpd) = nlpd_loss_grad(render, gt, &cfg.nlpd, k)?;
    let vol = volume_loss(scales);
    let base = 1.0 - w.nlpd;
    let image = (0..render.data.len())
        .map(|i| base * ((1.0 - w.dssim) * g_recon[i] + w.dssim * g_dssim[i]) + w.nlpd * g_nlpd[i])
        .collect();
    let scales = volume_loss_grad(scales).into_iter().map(|g| g * (base * w.vol)).collect();
    Ok((LossBreakdown::combine(recon, dssim, vol, nlpd, w), LossGrad { image, scales }))
}

/// Peak signal-to-noise ratio in dB, capped at 100.
pub fn psnr(render: &ImageBuffer, gt: &ImageBuffer) -> Result<f64> {
    let mse = l2_loss(render, gt)?;
    Ok(if mse < 1e-10 { 100.0 } else { -10.0 * mse.log10() })
}
