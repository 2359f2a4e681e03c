//! Scene directories: `points.txt`, `cameras.json` and `images/*.ppm`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::ImageBuffer;
use crate::scene::io::{format_cameras, format_point_cloud, parse_cameras, read_point_cloud, CameraRecord};
use crate::scene::{Camera, PointCloud};

/// A posed ground-truth image.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: ImageBuffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDirectory {
    pub cloud: PointCloud,
    pub records: Vec<CameraRecord>,
    pub views: Vec<View>,
}

/// `(train, test)` indices; indices divisible by `test_every` are held out.
pub fn split_indices(n: usize, test_every: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| i % test_every != 0)
}

impl SceneDirectory {
    pub fn load(root: &Path) -> Result<Self> {
        let cloud = read_point_cloud(&root.join("points.txt"))?;
        let records = parse_cameras(&fs::read_to_string(root.join("cameras.json"))?)?;
        let mut views = Vec::with_capacity(records.len());
        for r in &records {
            let path = root.join("images").join(&r.image_file);
            let image = ImageBuffer::read_ppm(&path)
                .map_err(|e| Error::InvalidScene(format!("{}: {e}", path.display())))?;
            if image.width != r.width || image.height != r.height {
                return Err(Error::InvalidScene(format!(
                    "{} is {}x{}, camera declares {}x{}",
                    r.image_file, image.width, image.height, r.width, r.height
                )));
            }
            views.push(View {
                camera: r.camera()?,
                image,
            });
        }
        Ok(Self { cloud, records, views })
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root.join("images"))?;
        fs::write(root.join("points.txt"), format_point_cloud(&self.cloud))?;
        fs::write(root.join("cameras.json"), format_cameras(&self.records)?)?;
        for (r, v) in self.records.iter().zip(&self.views) {
            v.image.write_ppm(&root.join("images").join(&r.image_file))?;
        }
        Ok(())
    }

    pub fn split(&self, test_every: usize) -> (Vec<usize>, Vec<usize>) {
        split_indices(self.views.len(), test_every)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_eighth_view_is_held_out() {
        let (train, test) = split_indices(17, 8);
        assert_eq!(test, vec![0, 8, 16]);
        assert_eq!(train.len(), 14);
        assert!(!train.contains(&0));
    }

    fn scene() -> SceneDirectory {
        let opts = crate::synth::SynthOptions {
            views: 2,
            width: 8,
            height: 6,
            points_per_blob: 5,
            ..Default::default()
        };
        crate::synth::synthesize(&opts).unwrap().scene
    }

    #[test]
    fn missing_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        scene().write(dir.path()).unwrap();
        fs::remove_file(dir.path().join("images/view_001.ppm")).unwrap();
        let err = SceneDirectory::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("view_001.ppm"), "{err}");
    }

    #[test]
    fn image_size_must_match_camera() {
        let dir = tempfile::tempdir().unwrap();
        scene().write(dir.path()).unwrap();
        ImageBuffer::new(6, 8).write_ppm(&dir.path().join("images/view_000.ppm")).unwrap();
        assert!(matches!(SceneDirectory::load(dir.path()), Err(Error::InvalidScene(_))));
    }
}
