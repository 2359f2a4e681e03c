//! Static scene structure: point clouds, anchors, cameras and the geometry
//! of the neural Gaussians decoded from each anchor.

mod bank;
mod geometry;
pub mod io;

pub use bank::{blend_feature_bank, downsample_feature, BankCache, FeatureBankNet, BANK_SIZE};
pub(crate) use bank::{blend, blend_backward};
pub use geometry::{
    compose_covariance, compose_covariance_backward, gaussian_density, quaternion_to_rotation,
    NeuralGaussian,
};

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Width of the anchor feature `f_v`.
pub const FEATURE_DIM: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, colors: Option<Vec<[f64; 3]>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointCloud);
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidPointCloud(format!("point {i} is not finite")));
        }
        if let Some(colors) = &colors {
            if colors.len() != points.len() {
                return Err(Error::InvalidPointCloud(format!(
                    "{} colors for {} points",
                    colors.len(),
                    points.len()
                )));
            }
        }
        Ok(Self { points, colors })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn colors(&self) -> Option<&[[f64; 3]]> {
        self.colors.as_deref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub position: Vec3,
    pub feature: Vec<f64>,
    /// Per-axis scale `l_v`, strictly positive.
    pub scale: Vec3,
    pub offsets: Vec<Vec3>,
}

impl Anchor {
    /// `{f_v, f_v↓1, f_v↓2}`; the coarse entries are derived from `f_v`.
    pub fn feature_bank(&self) -> [Vec<f64>; BANK_SIZE] {
        [
            self.feature.clone(),
            downsample_feature(&self.feature, 2),
            downsample_feature(&self.feature, 4),
        ]
    }
}

/// Snap every point to the voxel grid of spacing `voxel` (ties to even) and
/// keep one anchor per occupied voxel, sorted by `(x, y, z)`.
pub fn voxel_centers(cloud: &PointCloud, voxel: f64) -> Result<Vec<Vec3>> {
    if !(voxel > 0.0) || !voxel.is_finite() {
        return Err(Error::InvalidVoxelSize);
    }
    let cells: BTreeSet<[i64; 3]> = cloud
        .points
        .iter()
        .map(|p| {
            [
                (p.x / voxel).round_ties_even() as i64,
                (p.y / voxel).round_ties_even() as i64,
                (p.z / voxel).round_ties_even() as i64,
            ]
        })
        .collect();
    Ok(cells
        .into_iter()
        .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * voxel)
        .collect())
}

/// Voxelize `cloud` into anchors carrying `k` offsets each.
///
/// Features start uniform in `[-0.01, 0.01]`, offsets uniform in
/// `[-0.5, 0.5]`, and the anchor scale equals the voxel size on every axis.
pub fn voxelize_anchors<R: Rng>(
    cloud: &PointCloud,
    voxel: f64,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Anchor>> {
    let centers = voxel_centers(cloud, voxel)?;
    Ok(centers
        .into_iter()
        .map(|position| Anchor {
            position,
            feature: (0..FEATURE_DIM).map(|_| rng.gen_range(-0.01..=0.01)).collect(),
            scale: Vec3::repeat(voxel),
            offsets: (0..k)
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(-0.5..=0.5),
                        rng.gen_range(-0.5..=0.5),
                        rng.gen_range(-0.5..=0.5),
                    )
                })
                .collect(),
        })
        .collect())
}

/// Pinhole camera with a world-to-camera rigid transform (OpenCV axes:
/// x right, y down, z forward).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("zero image size".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        let r = &self.rotation;
        let err = (r.transpose() * r - Mat3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(Error::InvalidCamera(format!(
                "rotation is not orthonormal (error {err:e})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidCamera("non-finite parameters".into()));
        }
        Ok(())
    }

    /// Camera center `x_c = -Rᵀ t`.
    pub fn position(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Camera at `eye` looking at `target`; `up` is the approximate world up.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        width: usize,
        height: usize,
        fov_x: f64,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let fx = width as f64 / (2.0 * (fov_x / 2.0).tan());
        Self {
            width,
            height,
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewContext {
    pub distance: f64,
    pub direction: Vec3,
}

impl ViewContext {
    /// `δ_vc ⊕ d⃗_vc`, the four inputs of the bank weight net.
    pub fn as_array(&self) -> [f64; 4] {
        [self.distance, self.direction.x, self.direction.y, self.direction.z]
    }
}

pub fn view_context(position: &Vec3, camera: &Camera) -> Result<ViewContext> {
    let delta = position - camera.position();
    let distance = delta.norm();
    if distance < 1e-9 {
        return Err(Error::DegenerateViewDirection);
    }
    Ok(ViewContext {
        distance,
        direction: delta / distance,
    })
}

/// `μ_i = position + O_i ⊙ l_v`.
pub fn decode_positions(position: &Vec3, scale: &Vec3, offsets: &[Vec3]) -> Vec<Vec3> {
    offsets
        .iter()
        .map(|o| position + o.component_mul(scale))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.iter().map(|p| Vec3::from(*p)).collect(), None).unwrap()
    }

    #[test]
    fn voxelize_rounds_to_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let anchors = voxelize_anchors(&cloud(&[[1.3, 0.0, 0.0]]), 1.0, 10, &mut rng).unwrap();
        assert_eq!(anchors.len(), 1);
        assert_eq!(anchors[0].position, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(anchors[0].offsets.len(), 10);
        assert_eq!(anchors[0].scale, Vec3::repeat(1.0));
        assert!(anchors[0].feature.iter().all(|f| f.abs() <= 0.01));
        assert!(anchors[0].offsets.iter().all(|o| o.amax() <= 0.5));
    }

    #[test]
    fn voxelize_deduplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let anchors =
            voxelize_anchors(&cloud(&[[0.3, 0.0, 0.0], [0.4, 0.0, 0.0]]), 1.0, 2, &mut rng).unwrap();
        assert_eq!(anchors.len(), 1);
        assert_eq!(anchors[0].position, Vec3::zeros());
    }

    #[test]
    fn voxelize_ties_round_to_even() {
        let centers = voxel_centers(&cloud(&[[0.5, 1.5, -2.5]]), 1.0).unwrap();
        assert_eq!(centers, vec![Vec3::new(0.0, 2.0, -2.0)]);
    }

    #[test]
    fn voxelize_matches_hash_set_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[f64; 3]> = (0..1000)
            .map(|_| [rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0)])
            .collect();
        let oracle: HashSet<(i64, i64, i64)> = pts
            .iter()
            .map(|p| {
                let r = |v: f64| {
                    let f = v.floor();
                    let d = v - f;
                    let n = if d > 0.5 || (d == 0.5 && (f as i64) % 2 != 0) { f + 1.0 } else { f };
                    n as i64
                };
                (r(p[0]), r(p[1]), r(p[2]))
            })
            .collect();
        let centers = voxel_centers(&cloud(&pts), 1.0).unwrap();
        assert_eq!(centers.len(), oracle.len());
        for w in centers.windows(2) {
            let a = (w[0].x, w[0].y, w[0].z);
            let b = (w[1].x, w[1].y, w[1].z);
            assert!(a < b, "anchors not sorted");
        }
    }

    #[test]
    fn voxelize_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(PointCloud::new(vec![], None), Err(Error::EmptyPointCloud)));
        let c = cloud(&[[0.0, 0.0, 0.0]]);
        for eps in [0.0, -1.0, f64::NAN] {
            let err = voxelize_anchors(&c, eps, 1, &mut rng).unwrap_err();
            assert_eq!(err.to_string(), "invalid voxel size");
        }
    }

    #[test]
    fn view_context_examples() {
        let cam = Camera::look_at(Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, -1.0, 0.0), 8, 8, 1.0);
        assert!((cam.position()).norm() < 1e-15);
        let ctx = view_context(&Vec3::new(1.0, 0.0, 0.0), &cam).unwrap();
        assert!((ctx.distance - 1.0).abs() < 1e-15);
        assert!((ctx.direction - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        let ctx = view_context(&Vec3::new(0.0, 3.0, 4.0), &cam).unwrap();
        assert!((ctx.distance - 5.0).abs() < 1e-12);
        assert!((ctx.direction - Vec3::new(0.0, 0.6, 0.8)).norm() < 1e-12);
        let err = view_context(&Vec3::zeros(), &cam).unwrap_err();
        assert_eq!(err.to_string(), "degenerate view direction");
    }

    #[test]
    fn view_context_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let eye = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let cam = Camera::look_at(eye, Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0), 16, 16, 1.0);
            cam.validate().unwrap();
            let a = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let ctx = view_context(&a, &cam).unwrap();
            let d = [a.x - eye.x, a.y - eye.y, a.z - eye.z];
            let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert!((ctx.distance - dist).abs() < 1e-9);
            for i in 0..3 {
                assert!((ctx.direction[i] - d[i] / dist).abs() < 1e-9);
            }
            assert!((ctx.direction.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn camera_validation() {
        let mut cam = Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0), 8, 8, 1.0);
        cam.validate().unwrap();
        cam.rotation[(0, 0)] += 1e-3;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn decode_positions_examples() {
        let means = decode_positions(&Vec3::new(2.0, 0.0, 0.0), &Vec3::repeat(1.0), &[Vec3::zeros(); 3]);
        assert!(means.iter().all(|m| *m == Vec3::new(2.0, 0.0, 0.0)));
        let means = decode_positions(&Vec3::zeros(), &Vec3::repeat(1.0), &[Vec3::new(1.0, 0.0, 0.0)]);
        assert_eq!(means[0], Vec3::new(1.0, 0.0, 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pos = Vec3::new(0.1, -0.2, 0.3);
        let scale = Vec3::new(0.5, 2.0, 1.5);
        let offsets: Vec<Vec3> = (0..10)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let means = decode_positions(&pos, &scale, &offsets);
        for (m, o) in means.iter().zip(&offsets) {
            for a in 0..3 {
                assert!((m[a] - (pos[a] + o[a] * scale[a])).abs() < 1e-15);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_point() -> impl Strategy<Value = [f64; 3]> {
            [-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64]
        }

        proptest! {
            #[test]
            fn voxelization_is_idempotent(pts in prop::collection::vec(arb_point(), 1..50), eps in 0.05..2.0f64) {
                let first = voxel_centers(&cloud(&pts), eps).unwrap();
                let again: Vec<[f64; 3]> = first.iter().map(|p| [p.x, p.y, p.z]).collect();
                let second = voxel_centers(&cloud(&again), eps).unwrap();
                prop_assert_eq!(first, second);
            }

            #[test]
            fn positions_are_linear_in_offsets(
                o in prop::collection::vec(arb_point(), 1..10),
                s in [0.01..3.0f64, 0.01..3.0f64, 0.01..3.0f64],
            ) {
                let pos = Vec3::new(1.0, 2.0, 3.0);
                let scale = Vec3::from(s);
                let offsets: Vec<Vec3> = o.iter().map(|p| Vec3::from(*p)).collect();
                let doubled: Vec<Vec3> = offsets.iter().map(|v| v * 2.0).collect();
                let a = decode_positions(&pos, &scale, &offsets);
                let b = decode_positions(&pos, &scale, &doubled);
                for (ma, mb) in a.iter().zip(&b) {
                    prop_assert!(((mb - pos) - 2.0 * (ma - pos)).norm() < 1e-9);
                }
            }
        }
    }
}
