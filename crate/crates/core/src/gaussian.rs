//! Gaussian primitives and the scene container.

use nalgebra::Vector4;

use crate::camera::{Mat3, Vec3};
use crate::sh::{self, ShOrder};

/// Quaternion `(w, x, y, z)`.
pub type Quat = Vector4<f64>;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of the normalized quaternion `q / |q|`.
pub fn quat_to_matrix(q: &Quat) -> Mat3 {
    let q = q.normalize();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Unit quaternion rotating `+z` onto `dir`.
pub fn quat_z_to(dir: &Vec3) -> Quat {
    let d = dir.normalize();
    let z = Vec3::z();
    let c = z.dot(&d);
    if c < -1.0 + 1e-12 {
        return Quat::new(0.0, 1.0, 0.0, 0.0);
    }
    let axis = z.cross(&d);
    Quat::new(1.0 + c, axis.x, axis.y, axis.z).normalize()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub position: Vec3,
    /// Natural log of the per-axis standard deviations.
    pub log_scale: Vec3,
    pub rotation: Quat,
    /// Pre-sigmoid opacity.
    pub opacity_logit: f64,
    /// Coefficient-major SH coefficients, `3 * L` values.
    pub sh: Vec<f64>,
}

impl GaussianPrimitive {
    /// Isotropic primitive with a dc-only color that decodes to `rgb`.
    pub fn isotropic(position: Vec3, scale: f64, opacity: f64, rgb: [f64; 3], order: ShOrder) -> Self {
        let mut sh = vec![0.0; 3 * order.num_coeffs()];
        sh[..3].copy_from_slice(&sh::rgb_to_dc(rgb));
        GaussianPrimitive {
            position,
            log_scale: Vec3::repeat(scale.ln()),
            rotation: Quat::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: logit(opacity),
            sh,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_matrix(&self.rotation)
    }

    /// World-space covariance `R S S^T R^T`.
    pub fn covariance(&self) -> Mat3 {
        let m = self.rotation_matrix() * Mat3::from_diagonal(&self.scale());
        m * m.transpose()
    }

    /// Decoded color seen from direction `dir`.
    pub fn color(&self, dir: [f64; 3], order: ShOrder) -> [f64; 3] {
        sh::eval_raw(&self.sh, dir, order).map(|c| c.max(0.0))
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.norm();
        if n > 0.0 && n.is_finite() {
            self.rotation /= n;
        } else {
            self.rotation = Quat::new(1.0, 0.0, 0.0, 0.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    pub sh_order: ShOrder,
    pub primitives: Vec<GaussianPrimitive>,
    /// Spawned primitives waiting for the next merge.
    pub accumulation: Vec<GaussianPrimitive>,
    pub iteration: u64,
    /// Primitives inserted by the most recent merge.
    pub last_inserted: usize,
}

impl GaussianScene {
    pub fn new(sh_order: ShOrder) -> Self {
        GaussianScene {
            sh_order,
            primitives: Vec::new(),
            accumulation: Vec::new(),
            iteration: 0,
            last_inserted: 0,
        }
    }

    pub fn with_primitives(sh_order: ShOrder, primitives: Vec<GaussianPrimitive>) -> Self {
        GaussianScene { primitives, ..Self::new(sh_order) }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn prim(log_scale: Vec3, rotation: Quat) -> GaussianPrimitive {
        GaussianPrimitive {
            position: Vec3::zeros(),
            log_scale,
            rotation,
            opacity_logit: 0.0,
            sh: vec![0.0; 3],
        }
    }

    #[test]
    fn identity_covariance() {
        let p = prim(Vec3::zeros(), Quat::new(1.0, 0.0, 0.0, 0.0));
        assert!((p.covariance() - Mat3::identity()).amax() < 1e-15);
    }

    #[test]
    fn scaled_covariance() {
        let p = prim(Vec3::new(2f64.ln(), 0.0, 0.0), Quat::new(1.0, 0.0, 0.0, 0.0));
        let expected = Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0));
        assert!((p.covariance() - expected).amax() < 1e-14);
    }

    #[test]
    fn rotated_covariance() {
        let h = std::f64::consts::FRAC_PI_4;
        let p = prim(Vec3::new(2f64.ln(), 0.0, 0.0), Quat::new(h.cos(), 0.0, 0.0, h.sin()));
        // explicit product with a 90 degree rotation about z
        let r = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let s = Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0));
        let expected = r * s * s.transpose() * r.transpose();
        assert!((p.covariance() - expected).amax() < 1e-14);
        assert!((expected - Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 1.0))).amax() < 1e-15);
    }

    #[test]
    fn quat_z_to_aligns_axis() {
        for d in [Vec3::new(0.3, -0.2, 0.9), Vec3::new(0.0, 0.0, -1.0), Vec3::x()] {
            let r = quat_to_matrix(&quat_z_to(&d));
            assert!((r * Vec3::z() - d.normalize()).amax() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_logit_inverse() {
        for p in [1e-9, 0.005, 0.1, 0.5, 0.999] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-15);
        }
        assert!(sigmoid(-800.0) > 0.0 || sigmoid(-800.0) == 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }

    proptest! {
        #[test]
        fn covariance_spectrum_is_squared_scales(
            ls in prop::array::uniform3(-2.0f64..1.0),
            q in prop::array::uniform4(-1.0f64..1.0),
        ) {
            let qv = Quat::from_row_slice(&q);
            prop_assume!(qv.norm() > 0.1);
            let p = prim(Vec3::from_row_slice(&ls), qv);
            let cov = p.covariance();
            prop_assert!((cov - cov.transpose()).amax() < 1e-12);
            let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            let mut s2: Vec<f64> = p.scale().iter().map(|s| s * s).collect();
            s2.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&s2) {
                prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
                prop_assert!(*a > 0.0);
            }
        }
    }
}
