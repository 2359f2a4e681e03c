//! Synthetic scenes of analytic colored blobs seen from a ring of cameras.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{SceneDirectory, View};
use crate::error::{Error, Result};
use crate::raster::{project, rasterize_naive, ImageBuffer};
use crate::scene::io::CameraRecord;
use crate::scene::{compose_covariance, quaternion_to_rotation, Camera, NeuralGaussian, PointCloud, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Ellipsoid,
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sphere" => Ok(Shape::Sphere),
            "ellipsoid" => Ok(Shape::Ellipsoid),
            other => Err(Error::Parse(format!("unknown shape {other:?}; expected sphere or ellipsoid"))),
        }
    }
}

/// Parses a comma-separated shape list such as `sphere,ellipsoid`.
pub fn parse_shapes(text: &str) -> Result<Vec<Shape>> {
    text.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub shapes: Vec<Shape>,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub ring_radius: f64,
    pub fov_x: f64,
    pub points_per_blob: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            shapes: vec![Shape::Sphere, Shape::Ellipsoid, Shape::Sphere, Shape::Ellipsoid, Shape::Sphere],
            views: 10,
            width: 64,
            height: 64,
            seed: 0,
            ring_radius: 4.0,
            fov_x: 0.7,
            points_per_blob: 250,
        }
    }
}

/// Opacity of every ground-truth blob.
pub const BLOB_OPACITY: f64 = 0.95;

fn blob<R: Rng>(shape: Shape, rng: &mut R) -> Result<NeuralGaussian> {
    let mean = Vec3::new(rng.gen_range(-0.7..0.7), rng.gen_range(-0.4..0.4), rng.gen_range(-0.7..0.7));
    let (scale, rotation) = match shape {
        Shape::Sphere => (Vec3::repeat(rng.gen_range(0.15..0.3)), [1.0, 0.0, 0.0, 0.0]),
        Shape::Ellipsoid => {
            let s = Vec3::new(rng.gen_range(0.25..0.4), rng.gen_range(0.1..0.2), rng.gen_range(0.12..0.25));
            let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            (s, q.map(|v| v / n))
        }
    };
    let color = [rng.gen_range(0.15..0.95), rng.gen_range(0.15..0.95), rng.gen_range(0.15..0.95)];
    Ok(NeuralGaussian {
        mean,
        opacity: BLOB_OPACITY,
        color,
        scale,
        rotation,
        covariance: compose_covariance(&scale, &rotation)?,
    })
}

/// Cameras evenly spaced on a horizontal ring around the origin, with
/// heights alternating above and below the equator.
pub fn ring_cameras(opts: &SynthOptions) -> Vec<Camera> {
    (0..opts.views)
        .map(|i| {
            let theta = std::f64::consts::TAU * i as f64 / opts.views as f64;
            let height = if i % 2 == 0 { 0.8 } else { -0.5 };
            let eye = Vec3::new(opts.ring_radius * theta.cos(), height, opts.ring_radius * theta.sin());
            Camera::look_at(eye, Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0), opts.width, opts.height, opts.fov_x)
        })
        .collect()
}

/// Ground-truth image of `blobs` under `camera`, before quantization.
pub fn render_blobs(blobs: &[NeuralGaussian], camera: &Camera, background: [f64; 3]) -> ImageBuffer {
    let splats: Vec<_> = blobs.iter().filter_map(|g| project(g, camera)).collect();
    rasterize_naive(&splats, camera.width, camera.height, background)
}

/// A generated scene with its ground-truth blobs.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub blobs: Vec<NeuralGaussian>,
    pub scene: SceneDirectory,
}

/// Builds a blob scene; identical options give identical scenes. Images are
/// quantized to 8 bits so the in-memory views match the written files.
pub fn synthesize(opts: &SynthOptions) -> Result<SynthScene> {
    if opts.shapes.is_empty() {
        return Err(Error::InvalidScene("no shapes requested".into()));
    }
    if opts.views == 0 || opts.width == 0 || opts.height == 0 || opts.points_per_blob == 0 {
        return Err(Error::InvalidScene("views, resolution and point count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let blobs = opts.shapes.iter().map(|&s| blob(s, &mut rng)).collect::<Result<Vec<_>>>()?;

    let mut points = Vec::with_capacity(blobs.len() * opts.points_per_blob);
    let mut colors = Vec::with_capacity(points.capacity());
    for b in &blobs {
        let r = quaternion_to_rotation(&b.rotation);
        let mut placed = 0;
        while placed < opts.points_per_blob {
            let z = Vec3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            if z.norm() > 2.0 {
                continue;
            }
            points.push(b.mean + r * z.component_mul(&b.scale));
            colors.push(b.color);
            placed += 1;
        }
    }
    let cloud = PointCloud::new(points, Some(colors))?;

    let mut records = Vec::with_capacity(opts.views);
    let mut views = Vec::with_capacity(opts.views);
    for (i, camera) in ring_cameras(opts).into_iter().enumerate() {
        let image = render_blobs(&blobs, &camera, [0.0; 3]).quantized();
        records.push(CameraRecord::from_camera(&camera, format!("view_{i:03}.ppm")));
        views.push(View { camera, image });
    }
    Ok(SynthScene {
        blobs,
        scene: SceneDirectory { cloud, records, views },
    })
}
