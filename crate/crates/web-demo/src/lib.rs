//! Browser bindings: orbit the built-in synthetic scene, inspect the ray
//! behind a pixel and check splatting against volume rendering there.
//!
//! [`DemoScene`] holds the logic and is plain Rust; [`Demo`] wraps it for
//! JavaScript and turns errors into exceptions.

use conesplat_core::camera::{Camera, Vec3};
use conesplat_core::dataset::Dataset;
use conesplat_core::equivalence::{equivalence_render_options, verify_equivalence, EquivalenceReport};
use conesplat_core::field::{bounds_interval, march, median_depth, render_field, AnalyticField, RadianceField};
use conesplat_core::gaussian::GaussianScene;
use conesplat_core::image::ImageBuffer;
use conesplat_core::init::{initialize_scene, InitConfig};
use conesplat_core::raster::{render, RenderOptions};
use conesplat_core::sh::ShOrder;
use conesplat_core::synthetic::{standard_spec, SyntheticSceneSpec};
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub type DemoResult<T> = Result<T, String>;

fn err(e: conesplat_core::Error) -> String {
    e.to_string()
}

pub struct DemoScene {
    pub spec: SyntheticSceneSpec,
    pub field: AnalyticField,
    pub splats: GaussianScene,
    pub size: usize,
}

#[derive(Debug, Serialize)]
pub struct RayProfile {
    pub t: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub alpha: Vec<f64>,
    pub median_depth: Option<f64>,
}

/// Four bytes per pixel, alpha always opaque.
pub fn to_rgba(img: &ImageBuffer) -> Vec<u8> {
    img.to_rgb8().chunks(3).flat_map(|c| [c[0], c[1], c[2], 255]).collect()
}

impl DemoScene {
    /// Standard scene viewed at `size`×`size`, seeded with `n_primitives`
    /// splats placed from the analytic field.
    pub fn new(size: usize, n_primitives: usize, seed: u64) -> DemoResult<Self> {
        if !(16..=512).contains(&size) {
            return Err(format!("size must be in 16..=512, got {size}"));
        }
        let mut spec = standard_spec();
        spec.ring.focal *= size as f64 / spec.width as f64;
        spec.width = size;
        spec.height = size;
        spec.seed = seed;
        let field = spec.field().map_err(err)?;
        let cameras = spec.cameras().map_err(err)?;
        // initialization only samples pixel positions, so blank images do
        let images = cameras.iter().map(|c| ImageBuffer::new(c.width, c.height)).collect();
        let dataset = Dataset::new(cameras, images, Vec::new()).map_err(err)?;
        let cfg = InitConfig { p_init: n_primitives, seed, n_steps: 256, sh_order: ShOrder::new(0).map_err(err)?, ..Default::default() };
        let (splats, _) = initialize_scene(&field, &dataset, &cfg).map_err(err)?;
        Ok(DemoScene { spec, field, splats, size })
    }

    /// Camera on the scene's orbit at the given angles in degrees.
    pub fn camera(&self, azimuth_deg: f64, elevation_deg: f64) -> DemoResult<Camera> {
        if !(-89.0..=89.0).contains(&elevation_deg) {
            return Err("elevation must be within ±89 degrees".into());
        }
        let r = &self.spec.ring;
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let target = Vec3::from(r.look_at);
        let eye = target + Vec3::new(r.radius * el.cos() * az.cos(), -r.radius * el.sin(), r.radius * el.cos() * az.sin());
        Camera::look_at(eye, target, -Vec3::y(), r.focal, r.focal, self.size, self.size).map_err(err)
    }

    pub fn render_splats(&self, azimuth_deg: f64, elevation_deg: f64) -> DemoResult<Vec<u8>> {
        let cam = self.camera(azimuth_deg, elevation_deg)?;
        Ok(to_rgba(&render(&self.splats, &cam, &RenderOptions::default()).map_err(err)?.color))
    }

    pub fn render_field(&self, azimuth_deg: f64, elevation_deg: f64, steps: usize) -> DemoResult<Vec<u8>> {
        let cam = self.camera(azimuth_deg, elevation_deg)?;
        Ok(to_rgba(&render_field(&self.field, &cam, steps, self.spec.background).map_err(err)?))
    }

    /// Transmittance along the ray through pixel `(u, v)` and its median depth.
    pub fn ray_profile(&self, azimuth_deg: f64, elevation_deg: f64, u: usize, v: usize, steps: usize) -> DemoResult<RayProfile> {
        let cam = self.camera(azimuth_deg, elevation_deg)?;
        let ray = cam.pixel_ray(u as f64, v as f64).map_err(err)?;
        let Some((t0, t1)) = bounds_interval(&self.field, &ray) else {
            return Ok(RayProfile { t: Vec::new(), transmittance: Vec::new(), alpha: Vec::new(), median_depth: None });
        };
        let m = march(&self.field, &ray, t0, t1, steps).map_err(err)?;
        let median = median_depth(&self.field, &ray, t0, t1, steps).map_err(err)?;
        Ok(RayProfile { t: m.t, transmittance: m.transmittance, alpha: m.alpha, median_depth: median })
    }

    /// Splat the pixel's frustum primitives and compare with the midpoint march.
    pub fn equivalence(
        &self,
        azimuth_deg: f64,
        elevation_deg: f64,
        u: usize,
        v: usize,
        segments: usize,
        low_pass: bool,
    ) -> DemoResult<EquivalenceReport> {
        let cam = self.camera(azimuth_deg, elevation_deg)?;
        let ray = cam.pixel_ray(u as f64, v as f64).map_err(err)?;
        let (t0, t1) = bounds_interval(&self.field, &ray).unwrap_or((0.1, 2.0 * self.spec.ring.radius));
        let mut opts = equivalence_render_options();
        opts.low_pass = low_pass;
        opts.normalize_low_pass = low_pass;
        verify_equivalence(&self.field, &cam, &[(u, v)], t0, t1, segments, 2.0, &opts).map_err(err)
    }

    pub fn field_bounds_diagonal(&self) -> f64 {
        self.field.bounds().size().norm()
    }
}

#[wasm_bindgen]
pub struct Demo {
    inner: DemoScene,
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, n_primitives: usize, seed: u32) -> Result<Demo, JsError> {
        Ok(Demo { inner: DemoScene::new(size, n_primitives, seed as u64).map_err(js)? })
    }

    pub fn size(&self) -> usize {
        self.inner.size
    }

    pub fn primitive_count(&self) -> usize {
        self.inner.splats.len()
    }

    /// RGBA bytes of the splat scene.
    pub fn render_splats(&self, azimuth_deg: f64, elevation_deg: f64) -> Result<Vec<u8>, JsError> {
        self.inner.render_splats(azimuth_deg, elevation_deg).map_err(js)
    }

    /// RGBA bytes of the volume-rendered field.
    pub fn render_field(&self, azimuth_deg: f64, elevation_deg: f64, steps: usize) -> Result<Vec<u8>, JsError> {
        self.inner.render_field(azimuth_deg, elevation_deg, steps).map_err(js)
    }

    /// JSON `{t, transmittance, alpha, median_depth}`.
    pub fn ray_profile(&self, azimuth_deg: f64, elevation_deg: f64, u: usize, v: usize, steps: usize) -> Result<String, JsError> {
        let p = self.inner.ray_profile(azimuth_deg, elevation_deg, u, v, steps).map_err(js)?;
        serde_json::to_string(&p).map_err(|e| JsError::new(&e.to_string()))
    }

    /// JSON equivalence report for one pixel.
    pub fn equivalence(
        &self,
        azimuth_deg: f64,
        elevation_deg: f64,
        u: usize,
        v: usize,
        segments: usize,
        low_pass: bool,
    ) -> Result<String, JsError> {
        let rep = self.inner.equivalence(azimuth_deg, elevation_deg, u, v, segments, low_pass).map_err(js)?;
        Ok(rep.to_json())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> DemoScene {
        DemoScene::new(32, 150, 1).unwrap()
    }

    #[test]
    fn renders_have_rgba_size() {
        let d = demo();
        assert_eq!(d.splats.len(), 150);
        let a = d.render_splats(30.0, 20.0).unwrap();
        assert_eq!(a.len(), 32 * 32 * 4);
        assert!(a.chunks(4).all(|p| p[3] == 255));
        assert!(a.chunks(4).any(|p| p[0] > 20 || p[1] > 20 || p[2] > 20));
        let b = d.render_field(30.0, 20.0, 64).unwrap();
        assert_eq!(b.len(), a.len());
        assert!(d.render_splats(0.0, 95.0).is_err());
    }

    #[test]
    fn center_ray_hits_something() {
        let d = demo();
        let p = d.ray_profile(0.0, 20.0, 16, 16, 256).unwrap();
        assert_eq!(p.t.len(), 256);
        assert_eq!(p.transmittance[0], 1.0);
        assert!(p.transmittance.windows(2).all(|w| w[1] <= w[0]));
        let t = p.median_depth.unwrap();
        assert!(t > 1.0 && t < d.spec.ring.radius, "{t}");
        let miss = d.ray_profile(0.0, 20.0, 0, 0, 64).unwrap();
        assert_eq!(miss.median_depth, None);
    }

    #[test]
    fn equivalence_holds_without_low_pass() {
        let d = demo();
        let rep = d.equivalence(45.0, 10.0, 16, 15, 32, false).unwrap();
        assert!(rep.passed && rep.max_abs_diff < 1e-9, "{}", rep.max_abs_diff);
        let neg = d.equivalence(45.0, 10.0, 16, 15, 32, true).unwrap();
        assert!(!neg.passed);
    }
}
