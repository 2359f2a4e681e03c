//! Training configuration and its line-oriented `key = value` text form.

use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossWeights, NlpdParams, Reconstruction};
use crate::model::{Ablation, ModelConfig};
use crate::optim::LearningRates;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub k: usize,
    pub attention_heads: usize,
    pub voxel_size: f64,
    pub tau_alpha: f64,
    pub seed: u64,
    /// Write a snapshot every this many iterations; 0 disables.
    pub snapshot_every: usize,
    pub lr: LearningRates,
    pub weights: LossWeights,
    pub nlpd_sigma: f64,
    /// 0 picks the depth from the image size.
    pub nlpd_scales: usize,
    pub reconstruction: Reconstruction,
    pub kan_hidden: usize,
    pub kan_grid: usize,
    pub kan_order: usize,
    pub ablation: Ablation,
    pub threads: usize,
    pub background: [f64; 3],
    /// Every n-th view (index divisible by n) is held out for testing.
    pub test_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            iterations: 30_000,
            k: model.k,
            attention_heads: model.heads,
            voxel_size: 0.1,
            tau_alpha: model.tau_alpha,
            seed: 0,
            snapshot_every: 0,
            lr: LearningRates::default(),
            weights: LossWeights::default(),
            nlpd_sigma: 0.1,
            nlpd_scales: 0,
            reconstruction: Reconstruction::L2,
            kan_hidden: model.kan_hidden,
            kan_grid: model.kan_grid,
            kan_order: model.kan_order,
            ablation: Ablation::default(),
            threads: 1,
            background: [0.0; 3],
            test_every: 8,
        }
    }
}

pub const KEYS: &[&str] = &[
    "iterations",
    "k",
    "attention_heads",
    "voxel_size",
    "tau_alpha",
    "seed",
    "snapshot_every",
    "lr_feature",
    "lr_offset",
    "lr_scale",
    "lr_network",
    "lambda_dssim",
    "lambda_vol",
    "lambda_nlpd",
    "nlpd_sigma",
    "nlpd_scales",
    "reconstruction",
    "kan_hidden",
    "kan_grid",
    "kan_order",
    "disable_nlpd",
    "disable_hgsa",
    "disable_kan_cov",
    "disable_kan_op",
    "threads",
    "background",
    "test_every",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidConfigValue {
        key: key.into(),
        message: format!("cannot parse {value:?}"),
    })
}

fn fmt_bool(b: bool) -> String {
    b.to_string()
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "iterations" => self.iterations = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "attention_heads" => self.attention_heads = parse(key, v)?,
            "voxel_size" => self.voxel_size = parse(key, v)?,
            "tau_alpha" => self.tau_alpha = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "snapshot_every" => self.snapshot_every = parse(key, v)?,
            "lr_feature" => self.lr.feature = parse(key, v)?,
            "lr_offset" => self.lr.offset = parse(key, v)?,
            "lr_scale" => self.lr.scale = parse(key, v)?,
            "lr_network" => self.lr.network = parse(key, v)?,
            "lambda_dssim" => self.weights.dssim = parse(key, v)?,
            "lambda_vol" => self.weights.vol = parse(key, v)?,
            "lambda_nlpd" => self.weights.nlpd = parse(key, v)?,
            "nlpd_sigma" => self.nlpd_sigma = parse(key, v)?,
            "nlpd_scales" => self.nlpd_scales = parse(key, v)?,
            "reconstruction" => {
                self.reconstruction = match v {
                    "l2" => Reconstruction::L2,
                    "l1" => Reconstruction::L1,
                    _ => {
                        return Err(Error::InvalidConfigValue {
                            key: key.into(),
                            message: format!("expected l2 or l1, got {v:?}"),
                        })
                    }
                }
            }
            "kan_hidden" => self.kan_hidden = parse(key, v)?,
            "kan_grid" => self.kan_grid = parse(key, v)?,
            "kan_order" => self.kan_order = parse(key, v)?,
            "disable_nlpd" => self.ablation.disable_nlpd = parse(key, v)?,
            "disable_hgsa" => self.ablation.disable_hgsa = parse(key, v)?,
            "disable_kan_cov" => self.ablation.disable_kan_cov = parse(key, v)?,
            "disable_kan_op" => self.ablation.disable_kan_op = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "background" => {
                let parts: Vec<&str> = v.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(Error::InvalidConfigValue {
                        key: key.into(),
                        message: "expected three numbers".into(),
                    });
                }
                for (c, p) in parts.iter().enumerate() {
                    self.background[c] = parse(key, p)?;
                }
            }
            "test_every" => self.test_every = parse(key, v)?,
            _ => {
                return Err(Error::UnknownConfigKey {
                    key: key.into(),
                    valid: KEYS.join(", "),
                })
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "iterations" => self.iterations.to_string(),
            "k" => self.k.to_string(),
            "attention_heads" => self.attention_heads.to_string(),
            "voxel_size" => self.voxel_size.to_string(),
            "tau_alpha" => self.tau_alpha.to_string(),
            "seed" => self.seed.to_string(),
            "snapshot_every" => self.snapshot_every.to_string(),
            "lr_feature" => self.lr.feature.to_string(),
            "lr_offset" => self.lr.offset.to_string(),
            "lr_scale" => self.lr.scale.to_string(),
            "lr_network" => self.lr.network.to_string(),
            "lambda_dssim" => self.weights.dssim.to_string(),
            "lambda_vol" => self.weights.vol.to_string(),
            "lambda_nlpd" => self.weights.nlpd.to_string(),
            "nlpd_sigma" => self.nlpd_sigma.to_string(),
            "nlpd_scales" => self.nlpd_scales.to_string(),
            "reconstruction" => match self.reconstruction {
                Reconstruction::L2 => "l2".into(),
                Reconstruction::L1 => "l1".into(),
            },
            "kan_hidden" => self.kan_hidden.to_string(),
            "kan_grid" => self.kan_grid.to_string(),
            "kan_order" => self.kan_order.to_string(),
            "disable_nlpd" => fmt_bool(self.ablation.disable_nlpd),
            "disable_hgsa" => fmt_bool(self.ablation.disable_hgsa),
            "disable_kan_cov" => fmt_bool(self.ablation.disable_kan_cov),
            "disable_kan_op" => fmt_bool(self.ablation.disable_kan_op),
            "threads" => self.threads.to_string(),
            "background" => format!("{} {} {}", self.background[0], self.background[1], self.background[2]),
            "test_every" => self.test_every.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse(format!("line {}: expected `key = value`", n + 1)));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::InvalidConfigValue {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.k == 0 {
            return bad("k", "must be positive");
        }
        if self.attention_heads == 0 {
            return bad("attention_heads", "must be positive");
        }
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return bad("voxel_size", "must be positive");
        }
        if !self.tau_alpha.is_finite() {
            return bad("tau_alpha", "must be finite");
        }
        for (key, v) in [
            ("lr_feature", self.lr.feature),
            ("lr_offset", self.lr.offset),
            ("lr_scale", self.lr.scale),
            ("lr_network", self.lr.network),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(key, "must be a finite non-negative number");
            }
        }
        self.weights.validate()?;
        if !(self.nlpd_sigma > 0.0) {
            return bad("nlpd_sigma", "must be positive");
        }
        if self.kan_hidden == 0 || self.kan_grid == 0 {
            return bad("kan_grid", "KAN width and grid must be positive");
        }
        if self.threads == 0 {
            return bad("threads", "must be positive");
        }
        if self.test_every == 0 {
            return bad("test_every", "must be positive");
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background", "components must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            k: self.k,
            heads: self.attention_heads,
            kan_hidden: self.kan_hidden,
            kan_grid: self.kan_grid,
            kan_order: self.kan_order,
            tau_alpha: self.tau_alpha,
            background: self.background,
            ablation: self.ablation,
        }
    }

    /// Loss settings; the pyramid weight is forced to zero when ablated.
    pub fn loss_config(&self) -> LossConfig {
        let mut weights = self.weights.clone();
        if self.ablation.disable_nlpd {
            weights.nlpd = 0.0;
        }
        LossConfig {
            weights,
            reconstruction: self.reconstruction,
            nlpd: NlpdParams {
                sigmas: vec![self.nlpd_sigma],
            },
            scales: (self.nlpd_scales > 0).then_some(self.nlpd_scales),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_reference_constants() {
        let echo = TrainConfig::default().echo();
        for line in ["k = 10", "lambda_nlpd = 0.2", "attention_heads = 7", "iterations = 30000"] {
            assert!(echo.lines().any(|l| l == line), "missing {line}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("lr_feature = 0.0031\nbackground = 0.1 0.2 0.3\nreconstruction = l1\ndisable_hgsa = true\n")
            .unwrap();
        assert_eq!(TrainConfig::from_text(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = TrainConfig::from_text("# header\n\niterations = 5   # short run\n  k=4\n").unwrap();
        assert_eq!((cfg.iterations, cfg.k), (5, 4));
    }

    #[test]
    fn unknown_keys_list_the_valid_ones() {
        let err = TrainConfig::from_text("iteratoins = 5").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::UnknownConfigKey { .. }));
        for key in KEYS {
            assert!(msg.contains(key), "{msg}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(TrainConfig::from_text("k = ten").is_err());
        assert!(TrainConfig::from_text("k = 0").is_err());
        assert!(TrainConfig::from_text("lambda_nlpd = 1").is_err());
        assert!(TrainConfig::from_text("background = 0 0").is_err());
        assert!(TrainConfig::from_text("reconstruction = l3").is_err());
        assert!(TrainConfig::from_text("just words").is_err());
    }

    #[test]
    fn disabling_nlpd_zeroes_its_weight() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.loss_config().weights.nlpd, 0.2);
        cfg.ablation.disable_nlpd = true;
        assert_eq!(cfg.loss_config().weights.nlpd, 0.0);
    }
}
