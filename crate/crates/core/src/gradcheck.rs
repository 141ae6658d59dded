//! Finite-difference check of the rasterizer backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::{Camera, Vec3};
use crate::error::{domain, Result};
use crate::gaussian::{GaussianPrimitive, GaussianScene, Quat};
use crate::image::ImageBuffer;
use crate::raster::{render, render_backward, RenderOptions};
use crate::sh::ShOrder;

/// Worst relative error per parameter group, `|a - b| / max(|a|, |b|, floor)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GroupErrors {
    pub position: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity_logit: f64,
    pub sh: f64,
}

impl GroupErrors {
    pub fn max(&self) -> f64 {
        [self.position, self.log_scale, self.rotation, self.opacity_logit, self.sh]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Camera at the origin looking down `+z` with the principal point centered.
pub fn axis_camera(width: usize, height: usize, focal: f64) -> Result<Camera> {
    Camera::identity(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
}

/// `n` random primitives inside the frustum of [`axis_camera`] at depths 2 to 6.
pub fn random_scene<R: Rng>(rng: &mut R, n: usize, order: ShOrder, width: usize, focal: f64) -> GaussianScene {
    let half = width as f64 / (2.0 * focal);
    let prims = (0..n)
        .map(|_| {
            let z = rng.gen_range(2.0..6.0);
            let position = Vec3::new(rng.gen_range(-half..half) * z, rng.gen_range(-half..half) * z, z);
            let mut sh: Vec<f64> = (0..3 * order.num_coeffs()).map(|_| rng.gen_range(-0.3..0.3)).collect();
            for c in sh.iter_mut().take(3) {
                *c = rng.gen_range(0.2..1.5);
            }
            let rotation = loop {
                let q = Quat::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                if q.norm() > 0.3 {
                    break q.normalize();
                }
            };
            let mut log_scale = Vec3::zeros();
            for k in 0..3 {
                log_scale[k] = rng.gen_range(0.08f64..0.5).ln();
            }
            GaussianPrimitive { position, log_scale, rotation, opacity_logit: rng.gen_range(-2.0..1.0), sh }
        })
        .collect();
    GaussianScene::with_primitives(order, prims)
}

fn objective(scene: &GaussianScene, camera: &Camera, options: &RenderOptions, weights: &ImageBuffer) -> Result<f64> {
    let img = render(scene, camera, options)?.color;
    Ok(img.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum())
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares [`render_backward`] with central differences of step `h` on the
/// objective `sum(weights * render)`.
pub fn check_gradients(
    scene: &GaussianScene,
    camera: &Camera,
    options: &RenderOptions,
    weights: &ImageBuffer,
    h: f64,
) -> Result<GroupErrors> {
    if !(h > 0.0) {
        return Err(domain("finite-difference step must be positive"));
    }
    let grads = render_backward(scene, camera, options, weights)?;
    let floor = 1e-6;
    let mut errs = GroupErrors::default();
    let mut work = scene.clone();
    let mut fd = |i: usize, get: &dyn Fn(&mut GaussianPrimitive) -> &mut f64| -> Result<f64> {
        let orig = *get(&mut work.primitives[i]);
        *get(&mut work.primitives[i]) = orig + h;
        let plus = objective(&work, camera, options, weights)?;
        *get(&mut work.primitives[i]) = orig - h;
        let minus = objective(&work, camera, options, weights)?;
        *get(&mut work.primitives[i]) = orig;
        Ok((plus - minus) / (2.0 * h))
    };
    for (i, g) in grads.iter().enumerate() {
        for k in 0..3 {
            let d = fd(i, &|p| &mut p.position[k])?;
            errs.position = errs.position.max(rel(g.position[k], d, floor));
            let d = fd(i, &|p| &mut p.log_scale[k])?;
            errs.log_scale = errs.log_scale.max(rel(g.log_scale[k], d, floor));
        }
        for k in 0..4 {
            let d = fd(i, &|p| &mut p.rotation[k])?;
            errs.rotation = errs.rotation.max(rel(g.rotation[k], d, floor));
        }
        let d = fd(i, &|p| &mut p.opacity_logit)?;
        errs.opacity_logit = errs.opacity_logit.max(rel(g.opacity_logit, d, floor));
        for k in 0..g.sh.len() {
            let d = fd(i, &|p| &mut p.sh[k])?;
            errs.sh = errs.sh.max(rel(g.sh[k], d, floor));
        }
    }
    Ok(errs)
}

/// Gradient check on a seeded random scene of `n` primitives in an 8x8 view
/// with exact compositing.
pub fn random_check(seed: u64, n: usize, order: ShOrder) -> Result<GroupErrors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = axis_camera(8, 8, 8.0)?;
    let scene = random_scene(&mut rng, n, order, 8, 8.0);
    let data = (0..8 * 8 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let weights = ImageBuffer::from_data(8, 8, data)?;
    check_gradients(&scene, &camera, &RenderOptions::exact(), &weights, 1e-5)
}
