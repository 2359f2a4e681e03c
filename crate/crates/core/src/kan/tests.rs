use super::*;
use crate::gradcheck;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Textbook recursive Cox–de Boor, written independently of `basis_into`.
fn oracle_basis(i: usize, p: usize, x: f64, t: &[f64]) -> f64 {
    if p == 0 {
        return if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = t[i + p] - t[i];
    if d1 != 0.0 {
        v += (x - t[i]) / d1 * oracle_basis(i, p - 1, x, t);
    }
    let d2 = t[i + p + 1] - t[i + 1];
    if d2 != 0.0 {
        v += (t[i + p + 1] - x) / d2 * oracle_basis(i + 1, p - 1, x, t);
    }
    v
}

fn oracle_activation(layer: &KanLayer, q: usize, p: usize, x: f64) -> f64 {
    let t = layer.knots();
    let xc = x.clamp(-1.0, 1.0);
    let nb = layer.basis_count();
    let e = q * layer.n_in() + p;
    let mut spline = 0.0;
    for m in 0..nb {
        spline += layer.coefficients.data()[e * nb + m] * oracle_basis(m, DEFAULT_ORDER, xc, t);
    }
    layer.base_weight.data()[e] * x / (1.0 + (-x).exp()) + layer.spline_weight.data()[e] * spline
}

fn oracle_layer(layer: &KanLayer, z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; layer.n_out()];
    for q in 0..layer.n_out() {
        for p in 0..layer.n_in() {
            out[q] += oracle_activation(layer, q, p, z[p]);
        }
    }
    out
}

fn random_layer(n_in: usize, n_out: usize, seed: u64) -> KanLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = KanLayer::init(n_in, n_out, DEFAULT_GRID, DEFAULT_ORDER, &mut rng);
    l.visit_mut("", &mut |_, t| {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    });
    l
}

#[test]
fn linear_basis_is_one_hot_at_interior_knots() {
    let knots = uniform_knots(5, 1, -1.0, 1.0);
    for (m, x) in [-0.6, -0.2, 0.2, 0.6].iter().enumerate() {
        let b = spline_basis(*x, &knots, 1);
        let ones: Vec<usize> = b.iter().enumerate().filter(|(_, v)| (**v - 1.0).abs() < 1e-12).map(|(i, _)| i).collect();
        assert_eq!(ones, vec![m + 1], "{b:?}");
        assert!(b.iter().filter(|v| v.abs() > 1e-12).count() == 1);
    }
}

#[test]
fn basis_sums_to_one_and_is_nonnegative() {
    let knots = uniform_knots(5, 3, -1.0, 1.0);
    for i in 0..=400 {
        let x = -1.0 + i as f64 * 0.005;
        let b = spline_basis(x, &knots, 3);
        assert_eq!(b.len(), 8);
        assert!(b.iter().all(|v| *v >= 0.0));
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-9, "x={x}");
    }
    // Out of range clamps to the boundary.
    assert_eq!(spline_basis(3.0, &knots, 3), spline_basis(1.0, &knots, 3));
    assert_eq!(spline_basis(-7.0, &knots, 3), spline_basis(-1.0, &knots, 3));
}

#[test]
fn basis_matches_recursive_oracle() {
    let knots = uniform_knots(5, 3, -1.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let x: f64 = rng.gen_range(-1.0..1.0);
        let b = spline_basis(x, &knots, 3);
        for (m, v) in b.iter().enumerate() {
            assert!((v - oracle_basis(m, 3, x, &knots)).abs() < 1e-12);
        }
    }
}

#[test]
fn basis_derivative_matches_finite_differences() {
    let knots = uniform_knots(5, 3, -1.0, 1.0);
    let nb = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let x: f64 = rng.gen_range(-0.99..0.99);
        let (mut b, mut db) = (vec![0.0; nb], vec![0.0; nb]);
        assert!(basis_into(x, &knots, 3, &mut b, &mut db));
        let h = 1e-6;
        let bp = spline_basis(x + h, &knots, 3);
        let bm = spline_basis(x - h, &knots, 3);
        for m in 0..nb {
            assert!(((bp[m] - bm[m]) / (2.0 * h) - db[m]).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_layer_outputs_zero() {
    let l = KanLayer::zeros(4, 3, DEFAULT_GRID, DEFAULT_ORDER);
    assert_eq!(l.forward(&[0.3, -0.2, 0.9, 2.0], 1).0, vec![0.0; 3]);
    let net = KanNetwork::zeros(&[4, 5, 2], DEFAULT_GRID, DEFAULT_ORDER);
    assert_eq!(kan_forward(&net, &[0.1, 0.2, 0.3, 0.4]), vec![0.0; 2]);
}

#[test]
fn fitted_identity_splines_sum_their_inputs() {
    let mut layer = KanLayer::zeros(2, 1, DEFAULT_GRID, DEFAULT_ORDER);
    layer.spline_weight.fill(1.0);
    let knots = layer.knots().to_vec();
    let nb = layer.basis_count();
    let samples: Vec<f64> = (0..=100).map(|i| -1.0 + i as f64 * 0.02).collect();
    let a = DMatrix::from_fn(samples.len(), nb, |r, c| spline_basis(samples[r], &knots, DEFAULT_ORDER)[c]);
    let y = DVector::from_column_slice(&samples);
    let coef = a.svd(true, true).solve(&y, 1e-12).unwrap();
    for p in 0..2 {
        layer.coefficients.data_mut()[p * nb..(p + 1) * nb].copy_from_slice(coef.as_slice());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let z = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let out = layer.forward(&z, 1).0[0];
        assert!((out - (z[0] + z[1])).abs() < 1e-4);
    }
}

#[test]
fn layer_matches_double_loop_oracle() {
    let layer = random_layer(3, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let z = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
        let out = layer.forward(&z, 1).0;
        let expect = oracle_layer(&layer, &z);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn neuron_is_sum_of_edge_activations() {
    let layer = random_layer(4, 3, 6);
    let z = [0.3, -0.7, 0.95, -0.1];
    let out = layer.forward(&z, 1).0;
    for q in 0..3 {
        let posts: Vec<f64> = (0..4).map(|p| layer.activation(q, p, z[p])).collect();
        assert!((out[q] - posts.iter().sum::<f64>()).abs() < 1e-12);
        // Doubling the post-activations doubles the neuron.
        let doubled: f64 = posts.iter().map(|v| 2.0 * v).sum();
        assert!((2.0 * out[q] - doubled).abs() < 1e-12);
    }
}

#[test]
fn single_layer_network_equals_layer() {
    let layer = random_layer(3, 2, 7);
    let net = KanNetwork { layers: vec![layer.clone()] };
    let z = [0.1, -0.5, 0.8];
    assert_eq!(kan_forward(&net, &z), layer.forward(&z, 1).0);
}

#[test]
fn network_gradients_match_finite_differences() {
    let rows = 3;
    let mut net = KanNetwork {
        layers: vec![random_layer(3, 4, 8), random_layer(4, 2, 9)],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x: Vec<f64> = (0..rows * 3).map(|_| rng.gen_range(-0.9..0.9)).collect();
    let up: Vec<f64> = (0..rows * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |n: &KanNetwork, x: &[f64]| -> f64 { n.forward(x, rows).0.iter().zip(&up).map(|(a, b)| a * b).sum() };
    let (_, cache) = net.forward(&x, rows);
    let mut grads = net.clone();
    grads.zero_grad();
    let dx = net.backward(rows, &cache, &up, &mut grads);
    let analytic = gradcheck::flatten(&grads);
    let report = gradcheck::check_all(&mut net, &analytic, 1e-5, 1e-6, |n| loss(n, &x));
    assert!(report.max_relative_error < 1e-3, "{report:?}");
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += 1e-5;
        xm[i] -= 1e-5;
        let fd = (loss(&net, &xp) - loss(&net, &xm)) / 2e-5;
        assert!(gradcheck::relative_error(dx[i], fd, 1e-6) < 1e-3, "input {i}");
    }
}

fn opacity_head(seed: u64, k: usize, tau: f64) -> OpacityHead {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OpacityHead {
        net: AttributeNet::Kan(KanNetwork::init(&[6, 4, k], DEFAULT_GRID, DEFAULT_ORDER, &mut rng)),
        tau_alpha: tau,
    }
}

fn oracle_net(net: &KanNetwork, x: &[f64]) -> Vec<f64> {
    let squashed: Vec<f64> = x.iter().map(|v| v.tanh()).collect();
    net.layers.iter().fold(squashed, |z, l| oracle_layer(l, &z))
}

#[test]
fn zero_opacity_head_keeps_everything_at_zero_threshold() {
    let head = OpacityHead {
        net: AttributeNet::Kan(KanNetwork::zeros(&[36, 16, 10], DEFAULT_GRID, DEFAULT_ORDER)),
        tau_alpha: 0.0,
    };
    let out = head.forward(&vec![0.4; 2 * 36], 2);
    assert!(out.alpha.iter().all(|a| *a == 0.0));
    assert!(out.keep.iter().all(|k| *k));
}

#[test]
fn opacity_mask_matches_thresholded_oracle() {
    let head = opacity_head(11, 5, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let out = head.forward(&x, 4);
    let AttributeNet::Kan(net) = &head.net else { unreachable!() };
    for r in 0..4 {
        let expect = oracle_net(net, &x[r * 6..(r + 1) * 6]);
        for j in 0..5 {
            let a = expect[j].tanh();
            assert!((out.alpha[r * 5 + j] - a).abs() < 1e-12);
            assert_eq!(out.keep[r * 5 + j], a >= 0.05);
            assert!(a > -1.0 && a < 1.0);
        }
    }
}

#[test]
fn zero_covariance_head_halves_scale_and_falls_back_to_identity() {
    let head = CovarianceHead {
        net: AttributeNet::Kan(KanNetwork::zeros(&[36, 16, 7 * 10], DEFAULT_GRID, DEFAULT_ORDER)),
    };
    let base = [Vec3::new(0.2, 0.4, 0.8)];
    let out = head.forward(&vec![0.1; 36], 1, &base);
    assert_eq!(out.scales.len(), 10);
    assert!(out.scales.iter().all(|s| *s == base[0] * 0.5));
    assert_eq!(out.fallback_count, 10);
    assert!(out.rotations().iter().all(|q| *q == [1.0, 0.0, 0.0, 0.0]));
}

#[test]
fn covariance_head_matches_explicit_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let head = CovarianceHead {
        net: AttributeNet::Kan(KanNetwork::init(&[6, 4, 14], DEFAULT_GRID, DEFAULT_ORDER, &mut rng)),
    };
    let AttributeNet::Kan(net) = &head.net else { unreachable!() };
    let x: Vec<f64> = (0..3 * 6).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let base: Vec<Vec3> = (0..3).map(|i| Vec3::new(0.1, 0.2, 0.3) * (i + 1) as f64).collect();
    let out = head.forward(&x, 3, &base);
    for r in 0..3 {
        let raw = oracle_net(net, &x[r * 6..(r + 1) * 6]);
        for j in 0..2 {
            let o = &raw[j * 7..(j + 1) * 7];
            let g = r * 2 + j;
            for a in 0..3 {
                let s = base[r][a] / (1.0 + (-o[a]).exp());
                assert!((out.scales[g][a] - s).abs() < 1e-12);
                assert!(out.scales[g][a] > 0.0 && out.scales[g][a] < base[r][a]);
            }
            let n = (o[3] * o[3] + o[4] * o[4] + o[5] * o[5] + o[6] * o[6]).sqrt();
            let q = out.rotations()[g];
            for a in 0..4 {
                assert!((q[a] - o[3 + a] / n).abs() < 1e-12);
            }
            assert!((q.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-7);
        }
    }
}

#[derive(Clone)]
struct Heads {
    opacity: OpacityHead,
    cov: CovarianceHead,
}

impl Parameters for Heads {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.opacity.net.visit(&join(prefix, "opacity"), f);
        self.cov.net.visit(&join(prefix, "cov"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.opacity.net.visit_mut(&join(prefix, "opacity"), f);
        self.cov.net.visit_mut(&join(prefix, "cov"), f);
    }
}

#[test]
fn head_gradients_match_finite_differences() {
    for linear in [false, true] {
        let rows = 2;
        let k = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let make = |n_out: usize, rng: &mut ChaCha8Rng| {
            if linear {
                AttributeNet::Linear(Linear::uniform(6, n_out, rng))
            } else {
                AttributeNet::Kan(KanNetwork::init(&[6, 3, n_out], DEFAULT_GRID, DEFAULT_ORDER, rng))
            }
        };
        let mut heads = Heads {
            opacity: OpacityHead { net: make(k, &mut rng), tau_alpha: 0.0 },
            cov: CovarianceHead { net: make(7 * k, &mut rng) },
        };
        let x: Vec<f64> = (0..rows * 6).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let base = vec![Vec3::new(0.3, 0.5, 0.7), Vec3::new(1.0, 0.2, 0.4)];
        let ua: Vec<f64> = (0..rows * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let us: Vec<Vec3> = (0..rows * k).map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let uq: Vec<[f64; 4]> = (0..rows * k).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let loss = |h: &Heads, x: &[f64], base: &[Vec3]| -> f64 {
            let o = h.opacity.forward(x, rows);
            let c = h.cov.forward(x, rows, base);
            let mut l: f64 = o.alpha.iter().zip(&ua).map(|(a, b)| a * b).sum();
            for g in 0..rows * k {
                l += c.scales[g].dot(&us[g]);
                l += c.quaternions[g].iter().zip(&uq[g]).map(|(a, b)| a * b).sum::<f64>();
            }
            l
        };
        let o = heads.opacity.forward(&x, rows);
        let c = heads.cov.forward(&x, rows, &base);
        let mut grads = heads.clone();
        grads.zero_grad();
        let dx1 = heads.opacity.backward(&o, rows, &ua, &mut grads.opacity);
        let (dx2, dbase) = heads.cov.backward(&c, rows, &base, &us, &uq, &mut grads.cov);
        let analytic = gradcheck::flatten(&grads);
        let report = gradcheck::check_all(&mut heads, &analytic, 1e-5, 1e-6, |h| loss(h, &x, &base));
        assert!(report.max_relative_error < 1e-3, "linear={linear} {report:?}");
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += 1e-5;
            xm[i] -= 1e-5;
            let fd = (loss(&heads, &xp, &base) - loss(&heads, &xm, &base)) / 2e-5;
            assert!(gradcheck::relative_error(dx1[i] + dx2[i], fd, 1e-6) < 1e-3);
        }
        for r in 0..rows {
            for a in 0..3 {
                let (mut bp, mut bm) = (base.clone(), base.clone());
                bp[r][a] += 1e-5;
                bm[r][a] -= 1e-5;
                let fd = (loss(&heads, &x, &bp) - loss(&heads, &x, &bm)) / 2e-5;
                assert!(gradcheck::relative_error(dbase[r][a], fd, 1e-6) < 1e-3);
            }
        }
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn arb_knots() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.05..1.0f64, 11..20).prop_map(|gaps| {
            let mut t = vec![-2.0];
            for g in gaps {
                let last = *t.last().unwrap();
                t.push(last + g);
            }
            t
        })
    }

    proptest! {
        #[test]
        fn partition_of_unity_on_any_grid(knots in arb_knots(), u in 0.0..=1.0f64) {
            let order = 3;
            let lo = knots[order];
            let hi = knots[knots.len() - 1 - order];
            let x = lo + u * (hi - lo);
            let b = spline_basis(x, &knots, order);
            prop_assert!(b.iter().all(|v| *v >= -1e-15));
            prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn raising_tau_never_adds_gaussians(seed in 0u64..1000, lo in -1.0..1.0f64, gap in 0.0..1.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..3 * 6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = opacity_head(seed, 4, lo).forward(&x, 3);
            let b = opacity_head(seed, 4, lo + gap).forward(&x, 3);
            for (ka, kb) in a.keep.iter().zip(&b.keep) {
                prop_assert!(!kb || *ka);
            }
            prop_assert!(a.alpha.iter().all(|v| *v > -1.0 && *v < 1.0));
        }

        #[test]
        fn decoded_scales_stay_inside_anchor_scale(seed in 0u64..1000, l in [0.01..2.0f64, 0.01..2.0f64, 0.01..2.0f64]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let head = CovarianceHead { net: AttributeNet::Kan(KanNetwork::init(&[6, 4, 14], DEFAULT_GRID, DEFAULT_ORDER, &mut rng)) };
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let base = [Vec3::from(l)];
            let out = head.forward(&x, 1, &base);
            for s in &out.scales {
                for a in 0..3 {
                    prop_assert!(s[a] > 0.0 && s[a] < base[0][a]);
                }
            }
            for q in out.rotations() {
                prop_assert!((q.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-7);
            }
        }
    }
}
