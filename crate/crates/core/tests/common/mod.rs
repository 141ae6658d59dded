#![allow(dead_code)]

use conesplat_core::camera::{Camera, Vec3};
use conesplat_core::gaussian::{GaussianPrimitive, GaussianScene, Quat};
use conesplat_core::image::ImageBuffer;
use conesplat_core::sh::ShOrder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Camera at the origin looking down `+z`.
pub fn axis_camera(w: usize, h: usize, f: f64) -> Camera {
    Camera::identity(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
}

/// Random primitives in the view frustum of [`axis_camera`] with focal `f`.
pub fn random_scene(rng: &mut impl Rng, n: usize, order: ShOrder, w: usize, f: f64) -> GaussianScene {
    let half = w as f64 / (2.0 * f);
    let prims = (0..n)
        .map(|_| {
            let z = rng.gen_range(2.0..6.0);
            let position = Vec3::new(
                rng.gen_range(-half..half) * z,
                rng.gen_range(-half..half) * z,
                z,
            );
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
            GaussianPrimitive {
                position,
                log_scale: Vec3::new(
                    rng.gen_range(0.08f64..0.5).ln(),
                    rng.gen_range(0.08f64..0.5).ln(),
                    rng.gen_range(0.08f64..0.5).ln(),
                ),
                rotation,
                opacity_logit: rng.gen_range(-2.0..1.0),
                sh,
            }
        })
        .collect();
    GaussianScene::with_primitives(order, prims)
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize, lo: f64, hi: f64) -> ImageBuffer {
    let data = (0..w * h * 3).map(|_| rng.gen_range(lo..hi)).collect();
    ImageBuffer::from_data(w, h, data).unwrap()
}

pub fn dot(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}
