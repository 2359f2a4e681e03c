use super::{Mat3, Vec3};
use crate::error::{Error, Result};

/// A render-time Gaussian decoded from an anchor for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralGaussian {
    pub mean: Vec3,
    /// Pre-filter opacity in `(-1, 1)`.
    pub opacity: f64,
    pub color: [f64; 3],
    pub scale: Vec3,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub covariance: Mat3,
}

fn normalized(q: &[f64; 4]) -> Result<([f64; 4], f64)> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::DegenerateRotation);
    }
    Ok(([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm], norm))
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quaternion_to_rotation(q: &[f64; 4]) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(s)`; `q` is normalized internally.
pub fn compose_covariance(s: &Vec3, q: &[f64; 4]) -> Result<Mat3> {
    let (q, _) = normalized(q)?;
    let m = quaternion_to_rotation(&q) * Mat3::from_diagonal(s);
    Ok(m * m.transpose())
}

/// Gradients of `compose_covariance` w.r.t. `s` and the raw (unnormalized)
/// quaternion, given `dL/dΣ` over all nine entries.
pub fn compose_covariance_backward(s: &Vec3, q_raw: &[f64; 4], grad: &Mat3) -> Result<(Vec3, [f64; 4])> {
    let (q, norm) = normalized(q_raw)?;
    let r = quaternion_to_rotation(&q);
    let m = r * Mat3::from_diagonal(s);
    let dm = (grad + grad.transpose()) * m;
    let mut ds = Vec3::zeros();
    let mut dr = Mat3::zeros();
    for a in 0..3 {
        for j in 0..3 {
            ds[j] += dm[(a, j)] * r[(a, j)];
            dr[(a, j)] = dm[(a, j)] * s[j];
        }
    }
    let [w, x, y, z] = q;
    let g = |i: usize, j: usize| dr[(i, j)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1) + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let dq = [dw, dx, dy, dz];
    let dot: f64 = dq.iter().zip(&q).map(|(a, b)| a * b).sum();
    let dq_raw = [
        (dq[0] - q[0] * dot) / norm,
        (dq[1] - q[1] * dot) / norm,
        (dq[2] - q[2] * dot) / norm,
        (dq[3] - q[3] * dot) / norm,
    ];
    Ok((ds, dq_raw))
}

/// `exp(−½ (x−μ)ᵀ Σ⁻¹ (x−μ))`.
pub fn gaussian_density(x: &Vec3, g: &NeuralGaussian) -> Result<f64> {
    let eig = g.covariance.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || max / min >= 1e12 {
        return Err(Error::SingularCovariance);
    }
    let d = x - g.mean;
    let chol = g.covariance.cholesky().ok_or(Error::SingularCovariance)?;
    let solved = chol.solve(&d);
    Ok((-0.5 * d.dot(&solved)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat<R: Rng>(rng: &mut R) -> [f64; 4] {
        [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]
    }

    fn gaussian(mean: Vec3, cov: Mat3) -> NeuralGaussian {
        NeuralGaussian {
            mean,
            opacity: 0.5,
            color: [0.5; 3],
            scale: Vec3::repeat(1.0),
            rotation: [1.0, 0.0, 0.0, 0.0],
            covariance: cov,
        }
    }

    #[test]
    fn identity_rotation_examples() {
        let id = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(compose_covariance(&Vec3::repeat(1.0), &id).unwrap(), Mat3::identity());
        assert_eq!(
            compose_covariance(&Vec3::new(2.0, 1.0, 1.0), &id).unwrap(),
            Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0))
        );
        let err = compose_covariance(&Vec3::repeat(1.0), &[0.0; 4]).unwrap_err();
        assert_eq!(err.to_string(), "degenerate rotation");
    }

    #[test]
    fn eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let s = Vec3::new(rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0));
            let sigma = compose_covariance(&s, &random_quat(&mut rng)).unwrap();
            let mut eig: Vec<f64> = sigma.symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut expect = vec![s.x * s.x, s.y * s.y, s.z * s.z];
            eig.sort_by(f64::total_cmp);
            expect.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-9, "{eig:?} vs {expect:?}");
            }
            let det = sigma.determinant();
            assert!((det - (s.x * s.y * s.z).powi(2)).abs() < 1e-9 * det.max(1.0));
        }
    }

    #[test]
    fn rotation_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, _) = normalized(&random_quat(&mut rng)).unwrap();
        let r = quaternion_to_rotation(&q);
        assert!((r.transpose() * r - Mat3::identity()).abs().max() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let s = Vec3::new(rng.gen_range(0.2..2.0), rng.gen_range(0.2..2.0), rng.gen_range(0.2..2.0));
            let q = random_quat(&mut rng);
            let up = Mat3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let loss = |s: &Vec3, q: &[f64; 4]| compose_covariance(s, q).unwrap().component_mul(&up).sum();
            let (ds, dq) = compose_covariance_backward(&s, &q, &up).unwrap();
            let h = 1e-6;
            for i in 0..3 {
                let (mut sp, mut sm) = (s, s);
                sp[i] += h;
                sm[i] -= h;
                let fd = (loss(&sp, &q) - loss(&sm, &q)) / (2.0 * h);
                assert!((fd - ds[i]).abs() < 1e-7, "ds[{i}] {fd} {}", ds[i]);
            }
            for i in 0..4 {
                let (mut qp, mut qm) = (q, q);
                qp[i] += h;
                qm[i] -= h;
                let fd = (loss(&s, &qp) - loss(&s, &qm)) / (2.0 * h);
                assert!((fd - dq[i]).abs() < 1e-7, "dq[{i}] {fd} {}", dq[i]);
            }
        }
    }

    #[test]
    fn density_examples() {
        let g = gaussian(Vec3::new(1.0, 2.0, 3.0), Mat3::identity());
        assert_eq!(gaussian_density(&g.mean, &g).unwrap(), 1.0);
        let v = gaussian_density(&Vec3::new(2.0, 2.0, 3.0), &g).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.60653).abs() < 1e-5);
        let singular = gaussian(Vec3::zeros(), Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0)));
        assert_eq!(
            gaussian_density(&Vec3::zeros(), &singular).unwrap_err().to_string(),
            "singular covariance"
        );
    }

    #[test]
    fn density_matches_linear_solve_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let s = Vec3::new(rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0));
            let cov = compose_covariance(&s, &random_quat(&mut rng)).unwrap();
            let mean = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let x = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let d = x - mean;
            let solved = cov.lu().solve(&d).unwrap();
            let expect = (-0.5 * d.dot(&solved)).exp();
            let got = gaussian_density(&x, &gaussian(mean, cov)).unwrap();
            assert!((got - expect).abs() < 1e-10);
            assert!(got > 0.0 && got <= 1.0);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_quat() -> impl Strategy<Value = [f64; 4]> {
            [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64]
                .prop_filter("nonzero", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        }

        proptest! {
            #[test]
            fn covariance_is_symmetric_psd(s in [0.01..5.0f64, 0.01..5.0f64, 0.01..5.0f64], q in arb_quat()) {
                let sigma = compose_covariance(&Vec3::from(s), &q).unwrap();
                prop_assert!((sigma - sigma.transpose()).abs().max() < 1e-12);
                prop_assert!(sigma.symmetric_eigen().eigenvalues.min() >= -1e-9);
            }

            #[test]
            fn density_is_rotation_equivariant(
                s in [0.2..2.0f64, 0.2..2.0f64, 0.2..2.0f64],
                q in arb_quat(),
                rot in arb_quat(),
                x in [-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64],
            ) {
                let cov = compose_covariance(&Vec3::from(s), &q).unwrap();
                let mean = Vec3::new(0.3, -0.1, 0.2);
                let (rq, _) = normalized(&rot).unwrap();
                let r = quaternion_to_rotation(&rq);
                let a = gaussian_density(&Vec3::from(x), &gaussian(mean, cov)).unwrap();
                let b = gaussian_density(&(r * Vec3::from(x)), &gaussian(r * mean, r * cov * r.transpose())).unwrap();
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
