//! Volumetric rendering expressed as splatting.
//!
//! Each marched segment of a pixel's ray becomes one isotropic primitive
//! centered at the segment midpoint, with the segment's absorption as its
//! opacity and its size taken from the pixel cone. Seen from the source pixel
//! every kernel evaluates to exactly 1 at the pixel center, so alpha
//! compositing the primitives reproduces the marched color.

use serde::Serialize;

use crate::camera::{Camera, Vec3};
use crate::error::{domain, Result};
use crate::field::{march_with, RadianceField, SamplePlacement};
use crate::gaussian::{logit, quat_z_to, GaussianPrimitive, GaussianScene};
use crate::raster::{kernel_response, project, render_pixel, RenderOptions};
use crate::sh::{rgb_to_dc, ShOrder};

pub const EQUIVALENCE_TOLERANCE: f64 = 1e-9;
/// Lowest opacity given to a segment, so empty segments keep a finite logit.
pub const MIN_SEGMENT_ALPHA: f64 = 1e-12;
/// Highest opacity whose logit is finite in double precision.
const MAX_SEGMENT_ALPHA: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FrustumGaussianSet {
    pub pixel: (usize, usize),
    /// `n_segments + 1` segment boundaries along the ray.
    pub bounds: Vec<f64>,
    pub primitives: Vec<GaussianPrimitive>,
    /// Ray direction, shared by every center.
    pub direction: Vec3,
}

impl FrustumGaussianSet {
    pub fn scene(&self) -> GaussianScene {
        GaussianScene::with_primitives(ShOrder::new(0).expect("order 0"), self.primitives.clone())
    }
}

#[allow(clippy::too_many_arguments)]
pub fn frustums_to_gaussians(
    field: &dyn RadianceField,
    camera: &Camera,
    u: usize,
    v: usize,
    t_near: f64,
    t_far: f64,
    n_segments: usize,
    lambda_scale: f64,
) -> Result<FrustumGaussianSet> {
    if !(lambda_scale.is_finite() && lambda_scale > 0.0) {
        return Err(domain("lambda_scale must be positive"));
    }
    let ray = camera.pixel_ray(u as f64, v as f64)?;
    let m = march_with(field, &ray, t_near, t_far, n_segments, SamplePlacement::Midpoint)?;
    let order = ShOrder::new(0).expect("order 0");
    let mut primitives = Vec::with_capacity(n_segments);
    for i in 0..n_segments {
        let t = m.t[i];
        let alpha = m.alpha[i].clamp(MIN_SEGMENT_ALPHA, MAX_SEGMENT_ALPHA);
        let scale = lambda_scale * camera.cone_radius(u as f64, v as f64, t)?;
        let mut p = GaussianPrimitive::isotropic(ray.at(t), scale, 0.5, [0.0; 3], order);
        p.opacity_logit = logit(alpha);
        p.sh.copy_from_slice(&rgb_to_dc(m.rgb[i]));
        primitives.push(p);
    }
    let bounds = (0..=n_segments).map(|i| t_near + i as f64 * m.step).collect();
    Ok(FrustumGaussianSet { pixel: (u, v), bounds, primitives, direction: ray.direction })
}

/// Stretches every primitive along the ray by `factor`.
pub fn elongate_along_ray(set: &FrustumGaussianSet, factor: f64) -> FrustumGaussianSet {
    let mut out = set.clone();
    let q = quat_z_to(&set.direction);
    for p in &mut out.primitives {
        p.rotation = q;
        p.log_scale.z += factor.ln();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PixelComparison {
    pub u: usize,
    pub v: usize,
    pub splat: [f64; 3],
    pub march: [f64; 3],
    pub diff: f64,
    /// Per-segment alpha from the march; filled only for failing pixels.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub march_alpha: Vec<f64>,
    /// Per-segment alpha the rasterizer applied at the pixel center.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub splat_alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub passed: bool,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub n_segments: usize,
    pub low_pass: bool,
    pub pixels: Vec<PixelComparison>,
}

impl EquivalenceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Options that keep the rasterizer's compositing identical to the march:
/// no low-pass, no alpha clamp, no early termination, no culling.
pub fn equivalence_render_options() -> RenderOptions {
    RenderOptions::exact()
}

/// 3×3 grid of probe pixels: corners, edge midpoints and center.
pub fn probe_pixels(camera: &Camera) -> Vec<(usize, usize)> {
    let xs = [0, camera.width / 2, camera.width - 1];
    let ys = [0, camera.height / 2, camera.height - 1];
    ys.iter().flat_map(|&v| xs.iter().map(move |&u| (u, v))).collect()
}

/// Renders each pixel from its own frustum primitives and compares with a
/// midpoint march over the same segments.
#[allow(clippy::too_many_arguments)]
pub fn verify_equivalence(
    field: &dyn RadianceField,
    camera: &Camera,
    pixels: &[(usize, usize)],
    t_near: f64,
    t_far: f64,
    n_segments: usize,
    lambda_scale: f64,
    options: &RenderOptions,
) -> Result<EquivalenceReport> {
    if pixels.is_empty() {
        return Err(domain("no probe pixels"));
    }
    let results: Vec<Result<PixelComparison>> = crate::par::map_range(pixels.len(), |i| {
        let (u, v) = pixels[i];
        let set = frustums_to_gaussians(field, camera, u, v, t_near, t_far, n_segments, lambda_scale)?;
        let ray = camera.pixel_ray(u as f64, v as f64)?;
        let m = march_with(field, &ray, t_near, t_far, n_segments, SamplePlacement::Midpoint)?;
        let march = m.color_over(options.background);
        let splat = render_pixel(&set.scene(), camera, options, u, v)?;
        let diff = (0..3).map(|k| (splat[k] - march[k]).abs()).fold(0.0, f64::max);
        let mut cmp = PixelComparison { u, v, splat, march, diff, march_alpha: vec![], splat_alpha: vec![] };
        if !(diff < EQUIVALENCE_TOLERANCE) {
            cmp.march_alpha = m.alpha.clone();
            let center = nalgebra::Vector2::new(u as f64 + 0.5, v as f64 + 0.5);
            cmp.splat_alpha = set
                .primitives
                .iter()
                .map(|p| {
                    project(p, camera, options)
                        .and_then(|pr| kernel_response(center, &pr).map(|k| (p.opacity() * k * pr.amplitude).min(options.max_alpha)))
                        .unwrap_or(0.0)
                })
                .collect();
        }
        Ok(cmp)
    });
    let pixels = results.into_iter().collect::<Result<Vec<_>>>()?;
    let max_abs_diff = pixels.iter().map(|p| p.diff).fold(0.0, f64::max);
    Ok(EquivalenceReport {
        passed: max_abs_diff < EQUIVALENCE_TOLERANCE,
        max_abs_diff,
        tolerance: EQUIVALENCE_TOLERANCE,
        n_segments,
        low_pass: options.low_pass,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Aabb, AnalyticField, ColorPattern, FieldShape, Shape};
    use crate::gaussian::sigmoid;

    fn camera() -> Camera {
        Camera::look_at(Vec3::new(0.3, -0.2, -4.0), Vec3::zeros(), -Vec3::y(), 40.0, 40.0, 32, 24).unwrap()
    }

    fn box_field(density: f64) -> AnalyticField {
        let b = FieldShape::new(
            Shape::Box { min: Vec3::repeat(-1.5), max: Vec3::repeat(1.5) },
            density,
            ColorPattern::Constant([0.8, 0.4, 0.2]),
        );
        AnalyticField::new(vec![b], Aabb::new(Vec3::repeat(-10.0), Vec3::repeat(10.0)).unwrap()).unwrap()
    }

    #[test]
    fn empty_field_all_floor() {
        let f = AnalyticField::empty(Aabb::new(Vec3::repeat(-10.0), Vec3::repeat(10.0)).unwrap());
        let set = frustums_to_gaussians(&f, &camera(), 3, 4, 0.5, 8.0, 16, 2.0).unwrap();
        for p in &set.primitives {
            assert!((sigmoid(p.opacity_logit) - MIN_SEGMENT_ALPHA).abs() < 1e-24);
        }
        let r = verify_equivalence(&f, &camera(), &probe_pixels(&camera()), 0.5, 8.0, 16, 2.0, &equivalence_render_options())
            .unwrap();
        assert!(r.passed);
        assert!(r.pixels.iter().all(|p| p.march == [0.0; 3]));
    }

    #[test]
    fn ln2_segment_gives_half_opacity() {
        let f = box_field(std::f64::consts::LN_2);
        // one segment of length 1 fully inside the box along the center ray
        let cam = Camera::identity(40.0, 40.0, 16.0, 12.0, 32, 24).unwrap();
        let set = frustums_to_gaussians(&f, &cam, 15, 11, 0.2, 1.2, 1, 2.0).unwrap();
        assert!((sigmoid(set.primitives[0].opacity_logit) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_segment_constant_density() {
        let sigma = 0.7;
        let f = box_field(sigma);
        let cam = Camera::identity(40.0, 40.0, 16.0, 12.0, 32, 24).unwrap();
        let ray = cam.pixel_ray(10.0, 7.0).unwrap();
        // choose an interval fully inside the box
        let (t0, t1) = (0.1, 1.4 / ray.direction.z);
        let set = frustums_to_gaussians(&f, &cam, 10, 7, t0, t1, 1, 2.0).unwrap();
        assert_eq!(set.primitives.len(), 1);
        let expect = 1.0 - (-sigma * (t1 - t0)).exp();
        assert!((sigmoid(set.primitives[0].opacity_logit) - expect).abs() < 1e-12);
    }

    #[test]
    fn centers_are_collinear_and_kernels_hit_one() {
        let f = box_field(2.0);
        let cam = camera();
        let set = frustums_to_gaussians(&f, &cam, 5, 20, 1.0, 7.0, 32, 2.0).unwrap();
        let c = cam.center();
        let opts = equivalence_render_options();
        let center = nalgebra::Vector2::new(5.5, 20.5);
        for p in &set.primitives {
            let d = (p.position - c).normalize();
            assert!((d - set.direction).norm() < 1e-12);
            let pr = project(p, &cam, &opts).unwrap();
            assert!((kernel_response(center, &pr).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn box_with_64_segments_matches() {
        let f = box_field(1.3);
        let cam = camera();
        let r = verify_equivalence(&f, &cam, &probe_pixels(&cam), 1.0, 7.0, 64, 2.0, &equivalence_render_options())
            .unwrap();
        assert!(r.passed, "{}", r.max_abs_diff);
        assert!(r.pixels.iter().any(|p| p.march[0] > 0.1));
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["passed"], true);
    }

    #[test]
    fn normalized_low_pass_breaks_equivalence() {
        let f = box_field(1.3);
        let cam = camera();
        let opts = RenderOptions { low_pass: true, normalize_low_pass: true, ..equivalence_render_options() };
        let r = verify_equivalence(&f, &cam, &probe_pixels(&cam), 1.0, 7.0, 64, 2.0, &opts).unwrap();
        assert!(!r.passed);
        assert!(r.max_abs_diff > 1e-6);
        let bad = r.pixels.iter().find(|p| p.diff >= EQUIVALENCE_TOLERANCE).unwrap();
        assert_eq!(bad.march_alpha.len(), 64);
        assert_eq!(bad.splat_alpha.len(), 64);
    }

    #[test]
    fn elongation_along_ray_changes_nothing() {
        let f = box_field(0.9);
        let cam = camera();
        let opts = equivalence_render_options();
        for (u, v) in probe_pixels(&cam) {
            let set = frustums_to_gaussians(&f, &cam, u, v, 1.0, 7.0, 16, 2.0).unwrap();
            let a = render_pixel(&set.scene(), &cam, &opts, u, v).unwrap();
            let b = render_pixel(&elongate_along_ray(&set, 10.0).scene(), &cam, &opts, u, v).unwrap();
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
    }
}
