//! The per-view decoding and rendering pipeline with its reverse pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hgsa::{ColorHead, Hgsa, HgsaCache, DEFAULT_HEADS, INPUT_DIM};
use crate::kan::{
    AttributeNet, CovarianceHead, CovarianceOutput, KanNetwork, OpacityHead, OpacityOutput, COV_OUTPUTS,
    DEFAULT_GRID, DEFAULT_HIDDEN, DEFAULT_ORDER,
};
use crate::nn::Linear;
use crate::raster::{self, ImageBuffer, Splat};
use crate::scene::{
    blend, blend_backward, compose_covariance, compose_covariance_backward, view_context, voxelize_anchors,
    Anchor, BankCache, Camera, FeatureBankNet, Mat3, NeuralGaussian, PointCloud, Vec3, FEATURE_DIM,
};
use crate::tensor::{join, round_to_f32, Parameters, Tensor};

/// Added to every decoded covariance before projection.
pub const COVARIANCE_FLOOR: f64 = 1e-8;

/// Component removals for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub disable_nlpd: bool,
    /// Linear color head on the raw input features.
    pub disable_hgsa: bool,
    pub disable_kan_cov: bool,
    pub disable_kan_op: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub k: usize,
    pub heads: usize,
    pub kan_hidden: usize,
    pub kan_grid: usize,
    pub kan_order: usize,
    pub tau_alpha: f64,
    pub background: [f64; 3],
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 10,
            heads: DEFAULT_HEADS,
            kan_hidden: DEFAULT_HIDDEN,
            kan_grid: DEFAULT_GRID,
            kan_order: DEFAULT_ORDER,
            tau_alpha: 0.0,
            background: [0.0; 3],
            ablation: Ablation::default(),
        }
    }
}

/// Anchors plus every learnable network. Anchor positions are fixed; all
/// other state is visited through [`Parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub positions: Vec<Vec3>,
    /// `N×32`.
    pub features: Tensor,
    /// `N×k×3`, in units of the anchor scale.
    pub offsets: Tensor,
    /// `N×3`, `l_v = exp(log_scale)`.
    pub log_scales: Tensor,
    pub bank: FeatureBankNet,
    pub hgsa: Option<Hgsa>,
    pub color: ColorHead,
    pub opacity: OpacityHead,
    pub covariance: CovarianceHead,
}

fn attribute_net<R: Rng>(use_kan: bool, n_out: usize, cfg: &ModelConfig, rng: &mut R) -> AttributeNet {
    if use_kan {
        AttributeNet::Kan(KanNetwork::init(&[INPUT_DIM, cfg.kan_hidden, n_out], cfg.kan_grid, cfg.kan_order, rng))
    } else {
        AttributeNet::Linear(Linear::uniform(INPUT_DIM, n_out, rng))
    }
}

impl Model {
    pub fn new<R: Rng>(anchors: &[Anchor], config: ModelConfig, rng: &mut R) -> Result<Self> {
        let n = anchors.len();
        let k = config.k;
        if k == 0 {
            return Err(Error::InvalidConfigValue {
                key: "k".into(),
                message: "need at least one offset per anchor".into(),
            });
        }
        let mut features = Vec::with_capacity(n * FEATURE_DIM);
        let mut offsets = Vec::with_capacity(n * k * 3);
        let mut log_scales = Vec::with_capacity(n * 3);
        for a in anchors {
            if a.feature.len() != FEATURE_DIM || a.offsets.len() != k {
                return Err(Error::DimensionMismatch(format!(
                    "anchor has {} features and {} offsets, expected {FEATURE_DIM} and {k}",
                    a.feature.len(),
                    a.offsets.len()
                )));
            }
            features.extend_from_slice(&a.feature);
            offsets.extend(a.offsets.iter().flat_map(|o| [o.x, o.y, o.z]));
            log_scales.extend(a.scale.iter().map(|s| s.ln()));
        }
        let ab = config.ablation;
        let bank = FeatureBankNet::uniform(rng);
        let hgsa = (!ab.disable_hgsa).then(|| Hgsa::init(config.heads, rng));
        let color = ColorHead::init(INPUT_DIM, k, rng);
        let opacity = OpacityHead {
            net: attribute_net(!ab.disable_kan_op, k, &config, rng),
            tau_alpha: config.tau_alpha,
        };
        let covariance = CovarianceHead {
            net: attribute_net(!ab.disable_kan_cov, COV_OUTPUTS * k, &config, rng),
        };
        let mut model = Self {
            config,
            positions: anchors.iter().map(|a| a.position.map(|v| v as f32 as f64)).collect(),
            features: Tensor::from_vec(&[n, FEATURE_DIM], features),
            offsets: Tensor::from_vec(&[n, k, 3], offsets),
            log_scales: Tensor::from_vec(&[n, 3], log_scales),
            bank,
            hgsa,
            color,
            opacity,
            covariance,
        };
        round_to_f32(&mut model);
        Ok(model)
    }

    /// Voxelizes `cloud` and initializes every network.
    pub fn from_cloud<R: Rng>(cloud: &PointCloud, voxel: f64, config: ModelConfig, rng: &mut R) -> Result<Self> {
        let anchors = voxelize_anchors(cloud, voxel, config.k, rng)?;
        Self::new(&anchors, config, rng)
    }

    pub fn anchor_count(&self) -> usize {
        self.positions.len()
    }

    /// A zeroed parameter set of identical layout, for gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_grad();
        z
    }

    fn scale(&self, i: usize) -> Vec3 {
        let r = self.log_scales.row(i);
        Vec3::new(r[0].exp(), r[1].exp(), r[2].exp())
    }

    fn offset(&self, i: usize, j: usize) -> Vec3 {
        let o = &self.offsets.data()[(i * self.config.k + j) * 3..][..3];
        Vec3::new(o[0], o[1], o[2])
    }

    /// Anchors whose center lies in front of the camera and within one image
    /// extent of the frame.
    pub fn visible_anchors(&self, camera: &Camera) -> Vec<usize> {
        let (w, h) = (camera.width as f64, camera.height as f64);
        (0..self.anchor_count())
            .filter(|&i| {
                let p = camera.world_to_camera(&self.positions[i]);
                if !(p.z > raster::NEAR_PLANE) {
                    return false;
                }
                let u = camera.fx * p.x / p.z + camera.cx;
                let v = camera.fy * p.y / p.z + camera.cy;
                u >= -w && u <= 2.0 * w && v >= -h && v <= 2.0 * h
            })
            .collect()
    }

    /// Decodes, masks, projects and rasterizes the scene for one view.
    pub fn forward(&self, camera: &Camera) -> Result<ViewForward> {
        camera.validate()?;
        let k = self.config.k;
        let visible = self.visible_anchors(camera);
        let rows = visible.len();

        let mut bank = Vec::with_capacity(rows);
        let mut f_in = Vec::with_capacity(rows * INPUT_DIM);
        for &i in &visible {
            let ctx = view_context(&self.positions[i], camera)?;
            let cache = self.bank.weights(&ctx);
            f_in.extend_from_slice(&ctx.as_array());
            f_in.extend(blend(self.features.row(i), &cache.weights));
            bank.push(cache);
        }

        let hgsa = self.hgsa.as_ref().map(|h| h.forward(&f_in, rows));
        let color_in = hgsa.as_ref().map_or(&f_in, |(out, _)| out);
        let colors = self.color.forward(color_in, rows);
        let opacity = self.opacity.forward(&f_in, rows);
        let base_scales: Vec<Vec3> = visible.iter().map(|&i| self.scale(i)).collect();
        let cov = self.covariance.forward(&f_in, rows, &base_scales);
        let rotations = cov.rotations();

        let mut retained = Vec::new();
        let mut gaussians = Vec::new();
        for (r, &i) in visible.iter().enumerate() {
            for j in 0..k {
                let g = r * k + j;
                if !opacity.keep[g] {
                    continue;
                }
                let mean = self.positions[i] + self.offset(i, j).component_mul(&base_scales[r]);
                let covariance = compose_covariance(&cov.scales[g], &rotations[g])? + Mat3::identity() * COVARIANCE_FLOOR;
                retained.push(g);
                gaussians.push(NeuralGaussian {
                    mean,
                    opacity: opacity.alpha[g],
                    color: [colors[3 * g], colors[3 * g + 1], colors[3 * g + 2]],
                    scale: cov.scales[g],
                    rotation: rotations[g],
                    covariance,
                });
            }
        }
        let mut splats = Vec::new();
        let mut splat_source = Vec::new();
        for (n, g) in gaussians.iter().enumerate() {
            if let Some(s) = raster::project(g, camera) {
                splats.push(s);
                splat_source.push(n);
            }
        }
        let image = raster::rasterize(&splats, camera.width, camera.height, self.config.background);
        let stats = ViewStats {
            visible_anchors: rows,
            gaussians: rows * k,
            retained: retained.len(),
            splats: splats.len(),
            rotation_fallbacks: cov.fallback_count,
        };
        Ok(ViewForward {
            image,
            retained_scales: retained.iter().map(|&g| cov.scales[g]).collect(),
            gaussians,
            splats,
            stats,
            cache: ViewCache {
                visible,
                bank,
                f_in,
                hgsa,
                colors,
                opacity,
                cov,
                base_scales,
                retained,
                splat_source,
            },
        })
    }

    /// Accumulates into `grads` the gradient of a loss whose partials w.r.t.
    /// the rendered image and the retained Gaussians' scales are given.
    pub fn backward(
        &self,
        camera: &Camera,
        fwd: &ViewForward,
        grad_image: &[f64],
        grad_retained_scales: &[Vec3],
        grads: &mut Model,
    ) -> Result<()> {
        let c = &fwd.cache;
        let k = self.config.k;
        let rows = c.visible.len();
        let n = rows * k;
        let mut d_alpha = vec![0.0; n];
        let mut d_color = vec![0.0; 3 * n];
        let mut d_scale = vec![Vec3::zeros(); n];
        let mut d_quat = vec![[0.0; 4]; n];
        let mut d_mean = vec![Vec3::zeros(); n];

        for (t, &g) in c.retained.iter().enumerate() {
            d_scale[g] += grad_retained_scales[t];
        }
        let splat_grads = raster::rasterize_backward(
            &fwd.splats,
            camera.width,
            camera.height,
            self.config.background,
            grad_image,
        );
        for (sg, &src) in splat_grads.iter().zip(&c.splat_source) {
            let g = c.retained[src];
            let gauss = &fwd.gaussians[src];
            let (dmu, dsigma) = raster::project_backward(gauss, camera, sg);
            let (ds, dq) = compose_covariance_backward(&c.cov.scales[g], &c.cov.quaternions[g], &dsigma)?;
            d_scale[g] += ds;
            for a in 0..4 {
                d_quat[g][a] += dq[a];
            }
            d_mean[g] += dmu;
            d_alpha[g] += sg.opacity;
            for a in 0..3 {
                d_color[3 * g + a] += sg.color[a];
            }
        }

        let mut d_base = vec![Vec3::zeros(); rows];
        for (r, &i) in c.visible.iter().enumerate() {
            for j in 0..k {
                let g = r * k + j;
                if d_mean[g] == Vec3::zeros() {
                    continue;
                }
                let o = self.offset(i, j);
                let d_o = d_mean[g].component_mul(&c.base_scales[r]);
                let dst = &mut grads.offsets.data_mut()[(i * k + j) * 3..][..3];
                for a in 0..3 {
                    dst[a] += d_o[a];
                }
                d_base[r] += d_mean[g].component_mul(&o);
            }
        }

        let (mut d_in, d_cov_base) =
            self.covariance
                .backward(&c.cov, rows, &c.base_scales, &d_scale, &d_quat, &mut grads.covariance);
        for r in 0..rows {
            d_base[r] += d_cov_base[r];
        }
        for (r, &i) in c.visible.iter().enumerate() {
            let dst = grads.log_scales.row_mut(i);
            for a in 0..3 {
                dst[a] += d_base[r][a] * c.base_scales[r][a];
            }
        }

        let d_op = self.opacity.backward(&c.opacity, rows, &d_alpha, &mut grads.opacity);
        add(&mut d_in, &d_op);

        let d_color_in = match (&self.hgsa, &c.hgsa) {
            (Some(h), Some((out, cache))) => {
                let d_h = self.color.backward(out, rows, &c.colors, &d_color, &mut grads.color);
                let g_h = grads.hgsa.as_mut().expect("gradient buffer lacks attention parameters");
                h.backward(&c.f_in, rows, cache, &d_h, g_h)
            }
            _ => self.color.backward(&c.f_in, rows, &c.colors, &d_color, &mut grads.color),
        };
        add(&mut d_in, &d_color_in);

        for (r, &i) in c.visible.iter().enumerate() {
            let row = &d_in[r * INPUT_DIM..(r + 1) * INPUT_DIM];
            let (dw, df) = blend_backward(self.features.row(i), &c.bank[r].weights, &row[4..]);
            let dst = grads.features.row_mut(i);
            for (d, v) in dst.iter_mut().zip(&df) {
                *d += v;
            }
            self.bank.backward(&c.bank[r], &dw, &mut grads.bank);
        }
        Ok(())
    }

    /// Render-time Gaussians decoded for `camera`, after the opacity mask.
    pub fn decode(&self, camera: &Camera) -> Result<Vec<NeuralGaussian>> {
        Ok(self.forward(camera)?.gaussians)
    }

    pub fn render(&self, camera: &Camera) -> Result<ImageBuffer> {
        Ok(self.forward(camera)?.image)
    }
}

fn add(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

impl Parameters for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "anchor.feature"), &self.features);
        f(join(prefix, "anchor.offset"), &self.offsets);
        f(join(prefix, "anchor.log_scale"), &self.log_scales);
        self.bank.visit(&join(prefix, "bank"), f);
        if let Some(h) = &self.hgsa {
            h.visit(&join(prefix, "hgsa"), f);
        }
        self.color.visit(&join(prefix, "color"), f);
        self.opacity.net.visit(&join(prefix, "opacity"), f);
        self.covariance.net.visit(&join(prefix, "covariance"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "anchor.feature"), &mut self.features);
        f(join(prefix, "anchor.offset"), &mut self.offsets);
        f(join(prefix, "anchor.log_scale"), &mut self.log_scales);
        self.bank.visit_mut(&join(prefix, "bank"), f);
        if let Some(h) = &mut self.hgsa {
            h.visit_mut(&join(prefix, "hgsa"), f);
        }
        self.color.visit_mut(&join(prefix, "color"), f);
        self.opacity.net.visit_mut(&join(prefix, "opacity"), f);
        self.covariance.net.visit_mut(&join(prefix, "covariance"), f);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ViewStats {
    pub visible_anchors: usize,
    pub gaussians: usize,
    pub retained: usize,
    pub splats: usize,
    pub rotation_fallbacks: usize,
}

#[derive(Clone, Debug)]
struct ViewCache {
    visible: Vec<usize>,
    bank: Vec<BankCache>,
    f_in: Vec<f64>,
    hgsa: Option<(Vec<f64>, HgsaCache)>,
    colors: Vec<f64>,
    opacity: OpacityOutput,
    cov: CovarianceOutput,
    base_scales: Vec<Vec3>,
    /// Gaussian index (`row·k + j`) of every retained Gaussian.
    retained: Vec<usize>,
    /// Retained-list index of every splat.
    splat_source: Vec<usize>,
}

/// Output of [`Model::forward`], kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct ViewForward {
    pub image: ImageBuffer,
    /// Scales of the Gaussians that passed the opacity mask.
    pub retained_scales: Vec<Vec3>,
    pub gaussians: Vec<NeuralGaussian>,
    pub splats: Vec<Splat>,
    pub stats: ViewStats,
    cache: ViewCache,
}
