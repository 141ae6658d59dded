//! Procedural datasets: an analytic field seen from a ring of cameras.
//!
//! The spec is plain JSON so a generated dataset directory can carry it
//! (`scene.json`) and later commands can rebuild the exact field.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Vec3};
use crate::dataset::Dataset;
use crate::error::{domain, format_err, Result};
use crate::field::{render_field, Aabb, AnalyticField, ColorPattern, FieldShape, Shape};

pub const SCENE_FILE: &str = "scene.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ShapeSpec {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_size: [f64; 3] },
    Slab { normal: [f64; 3], lo: f64, hi: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColorSpec {
    Constant([f64; 3]),
    Checker { a: [f64; 3], b: [f64; 3], period: f64 },
    Waves { a: [f64; 3], b: [f64; 3], waves: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub shape: ShapeSpec,
    pub density: f64,
    pub color: ColorSpec,
    #[serde(default)]
    pub softness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    /// Height angle above the ring plane, degrees.
    pub elevation_deg: f64,
    pub look_at: [f64; 3],
    pub focal: f64,
    /// Random azimuth offset per camera, up to this many degrees.
    #[serde(default)]
    pub jitter_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub shapes: Vec<ShapeEntry>,
    /// `[min, max]`; defaults to the padded extent of the shapes.
    #[serde(default)]
    pub bounds: Option<[[f64; 3]; 2]>,
    pub ring: CameraRing,
    pub width: usize,
    pub height: usize,
    /// Every `k`-th view (starting at view `k - 1`) is held out.
    #[serde(default)]
    pub holdout_every: Option<usize>,
    pub gt_steps: usize,
    pub background: [f64; 3],
    pub seed: u64,
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl ShapeEntry {
    fn to_field_shape(&self) -> Result<FieldShape> {
        let shape = match &self.shape {
            ShapeSpec::Sphere { center, radius } => {
                if !(*radius > 0.0) {
                    return Err(domain("sphere radius must be positive"));
                }
                Shape::Sphere { center: v3(*center), radius: *radius }
            }
            ShapeSpec::Box { center, half_size } => {
                if half_size.iter().any(|&h| !(h > 0.0)) {
                    return Err(domain("box half sizes must be positive"));
                }
                Shape::Box { min: v3(*center) - v3(*half_size), max: v3(*center) + v3(*half_size) }
            }
            ShapeSpec::Slab { normal, lo, hi } => {
                let n = v3(*normal);
                if !(n.norm() > 0.0) || !(lo < hi) {
                    return Err(domain("slab needs a non-zero normal and lo < hi"));
                }
                Shape::Slab { normal: n.normalize(), lo: *lo, hi: *hi }
            }
        };
        let color = match &self.color {
            ColorSpec::Constant(c) => ColorPattern::Constant(*c),
            ColorSpec::Checker { a, b, period } => {
                if !(*period > 0.0) {
                    return Err(domain("checker period must be positive"));
                }
                ColorPattern::Checker { a: *a, b: *b, period: *period }
            }
            ColorSpec::Waves { a, b, waves } => {
                if !(*waves > 0.0) {
                    return Err(domain("wave period must be positive"));
                }
                ColorPattern::Waves { a: *a, b: *b, period: *waves }
            }
        };
        Ok(FieldShape { shape, density: self.density, color, softness: self.softness })
    }

    fn extent(&self) -> Option<(Vec3, Vec3)> {
        let pad = Vec3::repeat(self.softness / 2.0);
        match &self.shape {
            ShapeSpec::Sphere { center, radius } => {
                Some((v3(*center) - Vec3::repeat(*radius) - pad, v3(*center) + Vec3::repeat(*radius) + pad))
            }
            ShapeSpec::Box { center, half_size } => {
                Some((v3(*center) - v3(*half_size) - pad, v3(*center) + v3(*half_size) + pad))
            }
            ShapeSpec::Slab { .. } => None,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ring.count < 3 {
            return Err(domain("a synthetic scene needs at least 3 cameras"));
        }
        if self.width == 0 || self.height == 0 || self.gt_steps == 0 {
            return Err(domain("image size and gt_steps must be positive"));
        }
        if !(self.ring.radius > 0.0 && self.ring.focal > 0.0) {
            return Err(domain("ring radius and focal length must be positive"));
        }
        if let Some(k) = self.holdout_every {
            if k < 2 {
                return Err(domain("holdout_every must be at least 2"));
            }
        }
        let bounds = self.bounds()?;
        for (i, s) in self.shapes.iter().enumerate() {
            if let Some((lo, hi)) = s.extent() {
                if !(bounds.contains(&lo) && bounds.contains(&hi)) {
                    return Err(domain(format!("shape {i} extends outside the field bounds")));
                }
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> Result<Aabb> {
        if let Some([lo, hi]) = self.bounds {
            return Aabb::new(v3(lo), v3(hi));
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for s in &self.shapes {
            if let Some((a, b)) = s.extent() {
                lo = lo.inf(&a);
                hi = hi.sup(&b);
            }
        }
        if !lo.x.is_finite() {
            return Err(domain("bounds must be given when no shape is bounded"));
        }
        Ok(Aabb::new(lo, hi)?.padded(0.1))
    }

    pub fn field(&self) -> Result<AnalyticField> {
        let shapes = self.shapes.iter().map(ShapeEntry::to_field_shape).collect::<Result<Vec<_>>>()?;
        AnalyticField::new(shapes, self.bounds()?)
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let r = &self.ring;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let target = v3(r.look_at);
        let elev = r.elevation_deg.to_radians();
        // world up is -y, matching image rows growing downward
        let up = -Vec3::y();
        (0..r.count)
            .map(|i| {
                let jitter = if r.jitter_deg > 0.0 { rng.gen_range(0.0..r.jitter_deg) } else { 0.0 };
                let az = (i as f64 * 360.0 / r.count as f64 + jitter).to_radians();
                let eye = target
                    + Vec3::new(r.radius * elev.cos() * az.cos(), -r.radius * elev.sin(), r.radius * elev.cos() * az.sin());
                Camera::look_at(eye, target, up, r.focal, r.focal, self.width, self.height)
            })
            .collect()
    }

    pub fn holdout(&self) -> Vec<usize> {
        match self.holdout_every {
            Some(k) => (0..self.ring.count).filter(|i| (i + 1) % k == 0).collect(),
            None => Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| format_err("scene spec", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Three textured shapes seen by 24 cameras at 128×128; every sixth view is
/// held out, leaving 20 training views.
pub fn standard_spec() -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        shapes: vec![
            ShapeEntry {
                shape: ShapeSpec::Sphere { center: [-0.45, 0.0, 0.1], radius: 0.5 },
                density: 40.0,
                color: ColorSpec::Waves { a: [0.9, 0.2, 0.1], b: [0.95, 0.85, 0.25], waves: 0.5 },
                softness: 0.08,
            },
            ShapeEntry {
                shape: ShapeSpec::Box { center: [0.45, 0.0, -0.1], half_size: [0.35, 0.35, 0.4] },
                density: 40.0,
                color: ColorSpec::Waves { a: [0.1, 0.3, 0.85], b: [0.85, 0.9, 0.95], waves: 0.6 },
                softness: 0.08,
            },
            ShapeEntry {
                shape: ShapeSpec::Sphere { center: [0.3, -0.2, 0.65], radius: 0.25 },
                density: 40.0,
                color: ColorSpec::Constant([0.2, 0.75, 0.3]),
                softness: 0.08,
            },
        ],
        bounds: None,
        ring: CameraRing { count: 24, radius: 3.2, elevation_deg: 20.0, look_at: [0.0; 3], focal: 140.0, jitter_deg: 3.0 },
        width: 128,
        height: 128,
        holdout_every: Some(6),
        gt_steps: 2048,
        background: [0.0; 3],
        seed: 0,
    }
}

pub struct SyntheticScene {
    pub spec: SyntheticSceneSpec,
    pub field: AnalyticField,
    pub dataset: Dataset,
}

impl SyntheticScene {
    /// Writes the images, cameras, manifest and `scene.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<std::path::PathBuf> {
        let manifest = self.dataset.save(dir)?;
        std::fs::write(dir.join(SCENE_FILE), self.spec.to_json())?;
        Ok(manifest)
    }
}

pub fn generate(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let field = spec.field()?;
    let cameras = spec.cameras()?;
    let images = cameras
        .iter()
        .map(|c| render_field(&field, c, spec.gt_steps, spec.background))
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset::new(cameras, images, spec.holdout())?;
    Ok(SyntheticScene { spec: spec.clone(), field, dataset })
}
