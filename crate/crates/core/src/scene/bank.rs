use rand::Rng;

use super::{Anchor, ViewContext};
use crate::nn::{softmax, softmax_backward, Linear};
use crate::tensor::{join, Parameters, Tensor};

/// Number of entries in the feature bank.
pub const BANK_SIZE: usize = 3;
const HIDDEN: usize = 16;

/// Take every `stride`-th component of `feature` and tile the result back to
/// the full width.
pub fn downsample_feature(feature: &[f64], stride: usize) -> Vec<f64> {
    let kept = feature.len() / stride;
    (0..feature.len()).map(|i| feature[stride * (i % kept)]).collect()
}

/// Small MLP mapping `(δ_vc, d⃗_vc)` to the three bank logits.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBankNet {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug)]
pub struct BankCache {
    input: [f64; 4],
    hidden: Vec<f64>,
    pub weights: [f64; BANK_SIZE],
}

impl FeatureBankNet {
    pub fn zeros() -> Self {
        Self {
            hidden: Linear::zeros(4, HIDDEN),
            output: Linear::zeros(HIDDEN, BANK_SIZE),
        }
    }

    pub fn uniform<R: Rng>(rng: &mut R) -> Self {
        Self {
            hidden: Linear::uniform(4, HIDDEN, rng),
            output: Linear::uniform(HIDDEN, BANK_SIZE, rng),
        }
    }

    pub fn weights(&self, ctx: &ViewContext) -> BankCache {
        let input = ctx.as_array();
        let hidden: Vec<f64> = self.hidden.forward(&input, 1).into_iter().map(f64::tanh).collect();
        let logits = self.output.forward(&hidden, 1);
        let p = softmax(&logits);
        BankCache {
            input,
            hidden,
            weights: [p[0], p[1], p[2]],
        }
    }

    /// Backpropagates `dL/dw` (gradient w.r.t. the softmax weights).
    pub fn backward(&self, cache: &BankCache, grad_weights: &[f64; BANK_SIZE], grads: &mut FeatureBankNet) {
        let dlogits = softmax_backward(&cache.weights, grad_weights);
        let dh = self.output.backward(&cache.hidden, 1, &dlogits, &mut grads.output);
        let dpre: Vec<f64> = dh
            .iter()
            .zip(&cache.hidden)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        self.hidden.backward(&cache.input, 1, &dpre, &mut grads.hidden);
    }
}

impl Parameters for FeatureBankNet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// `f̂_v = w·f_v + w₁·f_v↓1 + w₂·f_v↓2` for the given softmax weights.
pub(crate) fn blend(feature: &[f64], weights: &[f64; BANK_SIZE]) -> Vec<f64> {
    let kept1 = feature.len() / 2;
    let kept2 = feature.len() / 4;
    (0..feature.len())
        .map(|i| {
            weights[0] * feature[i]
                + weights[1] * feature[2 * (i % kept1)]
                + weights[2] * feature[4 * (i % kept2)]
        })
        .collect()
}

/// Returns `(dL/dw, dL/df_v)` given `dL/df̂_v`.
pub(crate) fn blend_backward(
    feature: &[f64],
    weights: &[f64; BANK_SIZE],
    grad: &[f64],
) -> ([f64; BANK_SIZE], Vec<f64>) {
    let kept1 = feature.len() / 2;
    let kept2 = feature.len() / 4;
    let mut dw = [0.0; BANK_SIZE];
    let mut df = vec![0.0; feature.len()];
    for (i, &g) in grad.iter().enumerate() {
        let j1 = 2 * (i % kept1);
        let j2 = 4 * (i % kept2);
        dw[0] += g * feature[i];
        dw[1] += g * feature[j1];
        dw[2] += g * feature[j2];
        df[i] += g * weights[0];
        df[j1] += g * weights[1];
        df[j2] += g * weights[2];
    }
    (dw, df)
}

/// Blend the anchor's feature bank with view-dependent softmax weights.
/// Returns the blended feature and the weights `(w, w₁, w₂)`.
pub fn blend_feature_bank(
    anchor: &Anchor,
    ctx: &ViewContext,
    net: &FeatureBankNet,
) -> (Vec<f64>, [f64; BANK_SIZE]) {
    let cache = net.weights(ctx);
    (blend(&anchor.feature, &cache.weights), cache.weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Vec3, FEATURE_DIM};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn anchor_with(feature: Vec<f64>) -> Anchor {
        Anchor {
            position: Vec3::zeros(),
            feature,
            scale: Vec3::repeat(1.0),
            offsets: vec![],
        }
    }

    fn ctx() -> ViewContext {
        ViewContext {
            distance: 2.5,
            direction: Vec3::new(0.6, 0.0, 0.8),
        }
    }

    #[test]
    fn downsampling_tiles_strided_components() {
        let f: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let d1 = downsample_feature(&f, 2);
        let d2 = downsample_feature(&f, 4);
        assert_eq!(&d1[..4], &[0.0, 2.0, 4.0, 6.0]);
        assert_eq!(d1[16], 0.0);
        assert_eq!(d1[31], 30.0);
        assert_eq!(&d2[..3], &[0.0, 4.0, 8.0]);
        assert_eq!(d2[8], 0.0);
        assert_eq!(d2[31], 28.0);
    }

    #[test]
    fn zero_net_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = anchor_with(f.clone());
        let (blended, w) = blend_feature_bank(&a, &ctx(), &FeatureBankNet::zeros());
        assert_eq!(w, [1.0 / 3.0; 3]);
        let bank = a.feature_bank();
        for i in 0..FEATURE_DIM {
            let mean = (bank[0][i] + bank[1][i] + bank[2][i]) / 3.0;
            assert!((blended[i] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_bank_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = anchor_with(vec![0.25; FEATURE_DIM]);
        let net = FeatureBankNet::uniform(&mut rng);
        let (blended, _) = blend_feature_bank(&a, &ctx(), &net);
        assert!(blended.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn logits_one_zero_zero_match_hand_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut net = FeatureBankNet::zeros();
        net.output.bias.data_mut()[0] = 1.0;
        let (blended, w) = blend_feature_bank(&anchor_with(f.clone()), &ctx(), &net);
        let e = 1f64.exp();
        let expect_w = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for m in 0..3 {
            assert!((w[m] - expect_w[m]).abs() < 1e-15);
        }
        for i in 0..FEATURE_DIM {
            let expect = expect_w[0] * f[i] + expect_w[1] * f[2 * (i % 16)] + expect_w[2] * f[4 * (i % 8)];
            assert!((blended[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn blend_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let net = FeatureBankNet::uniform(&mut rng);
        let loss = |net: &FeatureBankNet, f: &[f64]| -> f64 {
            let c = net.weights(&ctx());
            blend(f, &c.weights).iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let cache = net.weights(&ctx());
        let (dw, df) = blend_backward(&f, &cache.weights, &up);
        let mut grads = FeatureBankNet::zeros();
        net.backward(&cache, &dw, &mut grads);
        let h = 1e-6;
        for i in 0..FEATURE_DIM {
            let (mut fp, mut fm) = (f.clone(), f.clone());
            fp[i] += h;
            fm[i] -= h;
            let fd = (loss(&net, &fp) - loss(&net, &fm)) / (2.0 * h);
            assert!((fd - df[i]).abs() < 1e-8, "feature {i}");
        }
        let analytic = crate::gradcheck::flatten(&grads);
        let mut probe = net.clone();
        let report = crate::gradcheck::check_all(&mut probe, &analytic, h, 1e-6, |n| loss(n, &f));
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bank_weights_form_a_simplex(seed in 0u64..1000, dist in 0.0..50.0f64, dx in -1.0..1.0f64, dy in -1.0..1.0f64) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut net = FeatureBankNet::uniform(&mut rng);
                net.output.weight.data_mut().iter_mut().for_each(|w| *w *= 10.0);
                let dir = Vec3::new(dx, dy, 0.5).normalize();
                let c = net.weights(&ViewContext { distance: dist, direction: dir });
                prop_assert!(c.weights.iter().all(|w| *w >= 0.0));
                prop_assert!((c.weights.iter().sum::<f64>() - 1.0).abs() < 1e-7);
            }
        }
    }
}
