//! The optimization loop, rendering and held-out evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::dataset::View;
use crate::error::{Error, Result};
use crate::losses::{default_scales, nlpd_loss, psnr, ssim, total_loss_grad, LossBreakdown, LossConfig, NlpdParams};
use crate::model::{Model, ViewForward};
use crate::raster::ImageBuffer;
use crate::optim::Adam;
use crate::scene::PointCloud;
use crate::tensor::Parameters;

/// Voxelizes `cloud` and initializes a model from `cfg.seed`.
pub fn init_model(cloud: &PointCloud, cfg: &TrainConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Model::from_cloud(cloud, cfg.voxel_size, cfg.model_config(), &mut rng)
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub view: usize,
    pub loss: LossBreakdown,
}

pub const CSV_HEADER: &str = "iter,loss,l2,dssim,vol,nlpd";

/// The loss log as CSV. Values use the shortest round-trip decimal form.
pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let l = &r.loss;
        out.push_str(&format!("{},{},{},{},{},{}\n", r.iteration, l.total, l.recon, l.dssim, l.vol, l.nlpd));
    }
    out
}

/// Stateful optimizer over a fixed list of training views.
pub struct Trainer<'a> {
    model: Model,
    grads: Model,
    adam: Adam,
    views: &'a [View],
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    iteration: usize,
    log: Vec<LossRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, views: &'a [View], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if views.is_empty() {
            return Err(Error::NoTrainViews);
        }
        Ok(Self {
            grads: model.zeros_like(),
            adam: Adam::new(model.parameter_count()),
            model,
            views,
            cfg: cfg.clone(),
            loss_cfg: cfg.loss_config(),
            iteration: 0,
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, &self.cfg)
    }

    /// Runs one iteration on the next view in round-robin order and returns
    /// the forward pass it optimized against.
    pub fn step(&mut self) -> Result<ViewForward> {
        let index = self.iteration % self.views.len();
        let view = &self.views[index];
        let fwd = self.model.forward(&view.camera)?;
        let (loss, grad) = total_loss_grad(&fwd.image, &view.image, &fwd.retained_scales, &self.loss_cfg)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                last_good: Box::new(self.checkpoint()),
            });
        }
        self.model.backward(&view.camera, &fwd, &grad.image, &grad.scales, &mut self.grads)?;
        let mut bad = None;
        self.grads.visit("", &mut |name, t| {
            if bad.is_none() && !t.is_finite() {
                bad = Some(name);
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFiniteGradient(name));
        }
        let lr = self.cfg.lr.clone();
        self.adam.step(&mut self.model, &mut self.grads, |name| lr.for_tensor(name));
        self.log.push(LossRecord {
            iteration: self.iteration,
            view: index,
            loss,
        });
        self.iteration += 1;
        Ok(fwd)
    }
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LossRecord>,
}

/// Trains for `cfg.iterations` steps on `views` inside a pool of
/// `cfg.threads` workers. `on_snapshot` runs every `cfg.snapshot_every`
/// iterations with the iteration count and the current checkpoint.
pub fn train(
    model: Model,
    views: &[View],
    cfg: &TrainConfig,
    mut on_snapshot: impl FnMut(usize, &Checkpoint) -> Result<()> + Send,
) -> Result<TrainOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidConfigValue {
            key: "threads".into(),
            message: e.to_string(),
        })?;
    pool.install(|| {
        let mut trainer = Trainer::new(model, views, cfg)?;
        while trainer.iteration() < cfg.iterations {
            trainer.step()?;
            let done = trainer.iteration();
            if cfg.snapshot_every > 0 && done % cfg.snapshot_every == 0 {
                on_snapshot(done, &trainer.checkpoint())?;
            }
        }
        let log = trainer.log.clone();
        Ok(TrainOutcome {
            model: trainer.into_model(),
            log,
        })
    })
}

/// Full-reference metrics for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub nlpd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_nlpd: f64,
}

/// Scores `render` against `gt` with the default pyramid settings.
pub fn view_metrics(view: usize, render: &ImageBuffer, gt: &ImageBuffer, nlpd: &NlpdParams) -> Result<ViewMetrics> {
    Ok(ViewMetrics {
        view,
        psnr: psnr(render, gt)?,
        ssim: ssim(render, gt)?,
        nlpd: nlpd_loss(render, gt, nlpd, default_scales(gt.width, gt.height))?,
    })
}

/// Renders every `(index, view)` pair and scores the 8-bit render.
pub fn evaluate(model: &Model, views: &[(usize, &View)]) -> Result<Evaluation> {
    if views.is_empty() {
        return Err(Error::NoTestViews);
    }
    let nlpd = NlpdParams::default();
    let per_view = views
        .iter()
        .map(|(i, v)| view_metrics(*i, &model.render(&v.camera)?.quantized(), &v.image, &nlpd))
        .collect::<Result<Vec<_>>>()?;
    let n = per_view.len() as f64;
    let mean = |f: fn(&ViewMetrics) -> f64| per_view.iter().map(f).sum::<f64>() / n;
    Ok(Evaluation {
        mean_psnr: mean(|m| m.psnr),
        mean_ssim: mean(|m| m.ssim),
        mean_nlpd: mean(|m| m.nlpd),
        views: per_view,
    })
}

impl Evaluation {
    /// JSON summary with sorted keys.
    pub fn to_json(&self) -> String {
        let views: Vec<Value> = self
            .views
            .iter()
            .map(|m| json!({"view": m.view, "psnr": m.psnr, "ssim": m.ssim, "nlpd": m.nlpd}))
            .collect();
        let value = json!({
            "mean": {"psnr": self.mean_psnr, "ssim": self.mean_ssim, "nlpd": self.mean_nlpd},
            "views": views,
            "perceptual_metric": "nlpd",
        });
        let mut s = serde_json::to_string_pretty(&value).expect("metrics serialize");
        s.push('\n');
        s
    }

    /// `metric=value` lines, per view then means.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# perceptual metric: nlpd (lower is better)\n");
        for m in &self.views {
            out.push_str(&format!(
                "view{}.psnr={}\nview{}.ssim={}\nview{}.nlpd={}\n",
                m.view, m.psnr, m.view, m.ssim, m.view, m.nlpd
            ));
        }
        out.push_str(&format!(
            "mean.psnr={}\nmean.ssim={}\nmean.nlpd={}\n",
            self.mean_psnr, self.mean_ssim, self.mean_nlpd
        ));
        out
    }
}
