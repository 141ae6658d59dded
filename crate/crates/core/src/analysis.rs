//! Image metrics and scene-structure statistics.
//!
//! Perceived size is measured as two standard deviations along the major
//! axis of the projected covariance, in pixels, with the low-pass filter off.

use serde::Serialize;

use crate::camera::Camera;
use crate::error::{domain, Result};
use crate::gaussian::{GaussianPrimitive, GaussianScene};
use crate::image::ImageBuffer;
use crate::raster::{project, render, RenderOptions};

pub use crate::loss::ssim;

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`; identical images
/// give `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_dims(b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// PSNR as text, with `inf` for identical images.
pub fn format_psnr(value: f64) -> String {
    if value.is_infinite() {
        "inf".to_string()
    } else {
        format!("{value:.4}")
    }
}

/// Mean number of primitives with alpha above 1/255 per pixel, over all views.
pub fn blend_count_stats(scene: &GaussianScene, cameras: &[Camera], options: &RenderOptions) -> Result<f64> {
    if cameras.is_empty() {
        return Err(domain("blend count needs at least one camera"));
    }
    let opts = RenderOptions { record_blend_count: true, ..options.clone() };
    let mut total = 0u64;
    let mut pixels = 0u64;
    for cam in cameras {
        let out = render(scene, cam, &opts)?;
        let counts = out.blend_count.expect("blend count requested");
        total += counts.iter().map(|&c| c as u64).sum::<u64>();
        pixels += counts.len() as u64;
    }
    Ok(total as f64 / pixels as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Annotation {
    pub label: String,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinSpec {
    pub min: f64,
    pub max: f64,
    pub bins: usize,
    pub log: bool,
}

impl BinSpec {
    pub fn log(min: f64, max: f64, bins: usize) -> Self {
        BinSpec { min, max, bins, log: true }
    }

    pub fn linear(min: f64, max: f64, bins: usize) -> Self {
        BinSpec { min, max, bins, log: false }
    }
}

/// Bin `i` covers `[edges[i], edges[i + 1])`; values outside land in the
/// underflow or overflow count.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
    pub log_spaced: bool,
    pub annotations: Vec<Annotation>,
}

impl Histogram {
    pub fn new(spec: BinSpec) -> Result<Self> {
        if spec.bins == 0 || !(spec.min < spec.max) || !spec.min.is_finite() || !spec.max.is_finite() {
            return Err(domain("histogram needs bins >= 1 and a finite range min < max"));
        }
        if spec.log && spec.min <= 0.0 {
            return Err(domain("log-spaced histogram needs a positive minimum"));
        }
        let edges = (0..=spec.bins)
            .map(|i| {
                let s = i as f64 / spec.bins as f64;
                if spec.log {
                    (spec.min.ln() + s * (spec.max.ln() - spec.min.ln())).exp()
                } else {
                    spec.min + s * (spec.max - spec.min)
                }
            })
            .collect();
        Ok(Histogram {
            edges,
            counts: vec![0; spec.bins],
            underflow: 0,
            overflow: 0,
            log_spaced: spec.log,
            annotations: Vec::new(),
        })
    }

    pub fn from_values(spec: BinSpec, values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut h = Self::new(spec)?;
        for v in values {
            h.add(v);
        }
        Ok(h)
    }

    pub fn add(&mut self, x: f64) {
        let n = self.counts.len();
        if x.is_nan() || x < self.edges[0] {
            self.underflow += 1;
        } else if x >= self.edges[n] {
            self.overflow += 1;
        } else {
            // first edge strictly greater than x, minus one
            let i = self.edges.partition_point(|&e| e <= x) - 1;
            self.counts[i.min(n - 1)] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lower,upper,count\n");
        let n = self.counts.len();
        s.push_str(&format!("-inf,{},{}\n", self.edges[0], self.underflow));
        for i in 0..n {
            s.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], self.counts[i]));
        }
        s.push_str(&format!("{},inf,{}\n", self.edges[n], self.overflow));
        for a in &self.annotations {
            s.push_str(&format!("# {}={}\n", a.label, a.value));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("histogram serializes")
    }
}

/// Smallest isotropic scale whose 2σ footprint spans one pixel at `depth`.
pub fn min_pixel_scale(focal: f64, depth: f64) -> f64 {
    depth / (2.0 * focal)
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

/// Histogram of every per-axis scale. With cameras, each view adds an
/// annotation at [`min_pixel_scale`] for the median depth of the primitives
/// in front of it.
pub fn scale_histogram(scene: &GaussianScene, spec: BinSpec, cameras: &[Camera]) -> Result<Histogram> {
    let mut h = Histogram::from_values(spec, scene.primitives.iter().flat_map(|p| p.scale().iter().copied().collect::<Vec<_>>()))?;
    for (i, cam) in cameras.iter().enumerate() {
        let mut depths: Vec<f64> = scene
            .primitives
            .iter()
            .map(|p| cam.world_to_camera(&p.position).z)
            .filter(|&z| z > 0.0)
            .collect();
        if let Some(z) = median(&mut depths) {
            let focal = (cam.fx + cam.fy) / 2.0;
            h.annotations.push(Annotation { label: format!("view_{i}_min_pixel_scale"), value: min_pixel_scale(focal, z) });
        }
    }
    Ok(h)
}

/// 2σ major-axis size in pixels of `prim` seen from `camera`, or `None` if
/// its center is behind the camera or outside the image.
pub fn perceived_size(prim: &GaussianPrimitive, camera: &Camera) -> Option<f64> {
    let opts = RenderOptions { low_pass: false, cull_sigmas: f64::INFINITY, ..RenderOptions::default() };
    let pr = project(prim, camera, &opts)?;
    let inside = pr.mean.x >= 0.0
        && pr.mean.y >= 0.0
        && pr.mean.x < camera.width as f64
        && pr.mean.y < camera.height as f64;
    if !inside {
        return None;
    }
    let major = pr.cov.symmetric_eigenvalues().max().max(0.0);
    Some(2.0 * major.sqrt())
}

pub fn perceived_sizes(scene: &GaussianScene, cameras: &[Camera]) -> Vec<f64> {
    let per_view = crate::par::map_range(cameras.len(), |i| {
        scene.primitives.iter().filter_map(|p| perceived_size(p, &cameras[i])).collect::<Vec<_>>()
    });
    per_view.into_iter().flatten().collect()
}

pub fn perceived_size_histogram(scene: &GaussianScene, cameras: &[Camera], spec: BinSpec) -> Result<Histogram> {
    Histogram::from_values(spec, perceived_sizes(scene, cameras))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneStats {
    pub n_gaussians: usize,
    pub mean_blend_count: f64,
    pub mean_psnr: Option<f64>,
    pub median_scale: Option<f64>,
    pub median_perceived_size: Option<f64>,
}
