//! Posed image collections and their JSON manifest.
//!
//! A manifest is a JSON object
//! `{"cameras": "cameras.json", "images": ["000.png", ...], "holdout": [3, 7]}`
//! with paths relative to the manifest's directory. `holdout` lists view
//! indices reserved for evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{read_cameras, write_cameras, Camera};
use crate::error::{domain, format_err, Result};
use crate::image::ImageBuffer;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageBuffer>,
    /// Views excluded from training.
    pub holdout: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub cameras: String,
    pub images: Vec<String>,
    #[serde(default)]
    pub holdout: Vec<usize>,
}

impl Dataset {
    pub fn new(cameras: Vec<Camera>, images: Vec<ImageBuffer>, holdout: Vec<usize>) -> Result<Self> {
        if cameras.len() != images.len() {
            return Err(domain(format!("{} cameras but {} images", cameras.len(), images.len())));
        }
        for (i, (c, img)) in cameras.iter().zip(&images).enumerate() {
            if c.width != img.width || c.height != img.height {
                return Err(domain(format!(
                    "view {i}: camera is {}x{} but image is {}x{}",
                    c.width, c.height, img.width, img.height
                )));
            }
        }
        if let Some(&bad) = holdout.iter().find(|&&i| i >= cameras.len()) {
            return Err(domain(format!("holdout view {bad} does not exist")));
        }
        Ok(Dataset { cameras, images, holdout })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn train_views(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| !self.holdout.contains(i)).collect()
    }

    pub fn test_views(&self) -> Vec<usize> {
        self.holdout.clone()
    }

    /// Copy restricted to the training views, with no holdout.
    pub fn training_subset(&self) -> Dataset {
        let keep = self.train_views();
        Dataset {
            cameras: keep.iter().map(|&i| self.cameras[i].clone()).collect(),
            images: keep.iter().map(|&i| self.images[i].clone()).collect(),
            holdout: Vec::new(),
        }
    }

    pub fn total_pixels(&self) -> usize {
        self.cameras.iter().map(Camera::num_pixels).sum()
    }

    /// Radius of the camera centers around their mean, padded by 10%.
    pub fn camera_extent(&self) -> f64 {
        let views = self.train_views();
        if views.is_empty() {
            return 1.0;
        }
        let centers: Vec<_> = views.iter().map(|&i| self.cameras[i].center()).collect();
        let mean = centers.iter().sum::<crate::camera::Vec3>() / centers.len() as f64;
        let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
        if r > 0.0 {
            1.1 * r
        } else {
            1.0
        }
    }

    /// Writes `cameras.json`, one PNG per view and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        write_cameras(&dir.join("cameras.json"), &self.cameras)?;
        let mut names = Vec::with_capacity(self.images.len());
        for (i, img) in self.images.iter().enumerate() {
            let name = format!("view_{i:03}.png");
            img.write_png(&dir.join(&name))?;
            names.push(name);
        }
        let manifest = Manifest { cameras: "cameras.json".into(), images: names, holdout: self.holdout.clone() };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path)?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| format_err("dataset manifest", e.to_string()))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let cameras = read_cameras(&base.join(&manifest.cameras))?;
        let images = manifest
            .images
            .iter()
            .map(|name| ImageBuffer::read_png(&base.join(name)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cameras, images, manifest.holdout)
    }
}
