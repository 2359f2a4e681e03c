//! Text point clouds (`x y z [r g b]` per line, `#` comments) and the
//! per-scene `cameras.json` listing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Camera, Mat3, PointCloud, Vec3};
use crate::error::{Error, Result};

pub fn parse_point_cloud(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut colors = Vec::new();
    let mut with_color: Option<bool> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("points line {}: {e}", lineno + 1)))?;
        let has_color = match values.len() {
            3 => false,
            6 => true,
            n => {
                return Err(Error::Parse(format!(
                    "points line {}: expected 3 or 6 values, found {n}",
                    lineno + 1
                )))
            }
        };
        if *with_color.get_or_insert(has_color) != has_color {
            return Err(Error::Parse(format!(
                "points line {}: mixed lines with and without color",
                lineno + 1
            )));
        }
        points.push(Vec3::new(values[0], values[1], values[2]));
        if has_color {
            colors.push([values[3], values[4], values[5]]);
        }
    }
    PointCloud::new(points, with_color.unwrap_or(false).then_some(colors))
}

pub fn format_point_cloud(cloud: &PointCloud) -> String {
    let mut out = String::from("# x y z [r g b]\n");
    for (i, p) in cloud.points().iter().enumerate() {
        match cloud.colors() {
            Some(c) => {
                let c = c[i];
                writeln!(out, "{} {} {} {} {} {}", p.x, p.y, p.z, c[0], c[1], c[2]).unwrap()
            }
            None => writeln!(out, "{} {} {}", p.x, p.y, p.z).unwrap(),
        }
    }
    out
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    parse_point_cloud(&fs::read_to_string(path)?)
}

/// One entry of `cameras.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub image_file: String,
}

impl CameraRecord {
    pub fn from_camera(camera: &Camera, image_file: impl Into<String>) -> Self {
        let r = &camera.rotation;
        Self {
            width: camera.width,
            height: camera.height,
            fx: camera.fx,
            fy: camera.fy,
            cx: camera.cx,
            cy: camera.cy,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [camera.translation.x, camera.translation.y, camera.translation.z],
            image_file: image_file.into(),
        }
    }

    pub fn camera(&self) -> Result<Camera> {
        let camera = Camera {
            width: self.width,
            height: self.height,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: Mat3::from_row_slice(&self.rotation),
            translation: Vec3::from(self.translation),
        };
        camera.validate()?;
        Ok(camera)
    }
}

pub fn parse_cameras(text: &str) -> Result<Vec<CameraRecord>> {
    let records: Vec<CameraRecord> = serde_json::from_str(text)?;
    for r in &records {
        r.camera()?;
    }
    Ok(records)
}

pub fn format_cameras(records: &[CameraRecord]) -> Result<String> {
    // Round-trip through `Value` so object keys come out sorted.
    let value = serde_json::to_value(records)?;
    let mut s = serde_json::to_string_pretty(&value)?;
    s.push('\n');
    Ok(s)
}

/// A single camera pose, in the same schema as a `cameras.json` entry.
pub fn parse_camera(text: &str) -> Result<Camera> {
    let record: CameraRecord = serde_json::from_str(text)?;
    record.camera()
}
