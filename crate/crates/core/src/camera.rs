//! Pinhole cameras, pixel rays and pixel-cone footprints.
//!
//! Image coordinates are continuous with the origin at the top-left corner of
//! the image; integer pixel `(u, v)` covers `[u, u+1) x [v, v+1)` and its
//! center is `(u + 0.5, v + 0.5)`. Camera space is right-handed with `+x`
//! right, `+y` down and the camera looking along `+z`.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{domain, format_err, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let n = direction.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(domain("ray direction must be finite and non-zero"));
        }
        Ok(Ray { origin, direction: direction / n })
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation: `x_cam = rotation * x_world + translation`.
    pub translation: Vec3,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(domain(format!("focal lengths must be positive, got fx={fx} fy={fy}")));
        }
        if width == 0 || height == 0 {
            return Err(domain("camera must have non-zero width and height"));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(domain(format!(
                "principal point ({cx}, {cy}) outside a {width}x{height} image"
            )));
        }
        let ortho = (rotation * rotation.transpose() - Mat3::identity()).amax();
        if !(ortho <= 1e-6) || rotation.determinant() <= 0.0 {
            return Err(domain("camera rotation must be a proper orthonormal matrix"));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(domain("camera translation must be finite"));
        }
        Ok(Camera { fx, fy, cx, cy, width, height, rotation, translation })
    }

    /// Camera with identity pose at the origin.
    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(fx, fy, cx, cy, width, height, Mat3::identity(), Vec3::zeros())
    }

    /// Camera at `eye` looking at `target`, with `up` pointing toward the top of the image.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| domain("look_at: eye and target coincide"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| domain("look_at: up is parallel to the viewing direction"))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(fx, fy, width as f64 / 2.0, height as f64 / 2.0, width, height, rotation, translation)
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Projects a camera-space point to continuous image coordinates.
    #[inline]
    pub fn project_camera_point(&self, pc: &Vec3) -> (f64, f64) {
        (self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy)
    }

    /// Unit world-space direction through continuous image coordinates `(x, y)`.
    ///
    /// Points outside the image are allowed; they extrapolate the pinhole model.
    pub fn direction_at(&self, x: f64, y: f64) -> Vec3 {
        let d_cam = Vec3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d_cam).normalize()
    }

    /// Ray through continuous image coordinates `(x, y)`.
    pub fn ray_at(&self, x: f64, y: f64) -> Ray {
        Ray { origin: self.center(), direction: self.direction_at(x, y) }
    }

    /// Ray through the center of pixel `(u, v)`; fractional indices are allowed.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Result<Ray> {
        self.check_pixel(u, v)?;
        Ok(self.ray_at(u + 0.5, v + 0.5))
    }

    /// Radius of the pixel cone through image point `(x, y)` at distance `t`.
    ///
    /// Uses the directions through the point and through its `+x` and `+y`
    /// neighbors one pixel away, extrapolated beyond the image border if needed.
    pub fn cone_radius_at(&self, x: f64, y: f64, t: f64) -> Result<f64> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(domain(format!("cone radius needs a positive distance, got {t}")));
        }
        let d = self.direction_at(x, y);
        let dx = self.direction_at(x + 1.0, y);
        let dy = self.direction_at(x, y + 1.0);
        Ok(t * ((dx - d).norm() + (dy - d).norm()) / 2.0)
    }

    /// Cone radius for pixel `(u, v)` (centered at `(u + 0.5, v + 0.5)`).
    pub fn cone_radius(&self, u: f64, v: f64, t: f64) -> Result<f64> {
        self.check_pixel(u, v)?;
        self.cone_radius_at(u + 0.5, v + 0.5, t)
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    fn check_pixel(&self, u: f64, v: f64) -> Result<()> {
        if !(u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64) {
            return Err(domain(format!(
                "pixel ({u}, {v}) outside a {}x{} image",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// On-disk camera record: intrinsics plus row-major world-to-camera rotation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = c.rotation[(i, j)];
            }
        }
        CameraRecord {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            r,
            t: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl TryFrom<&CameraRecord> for Camera {
    type Error = crate::Error;

    fn try_from(rec: &CameraRecord) -> Result<Self> {
        Camera::new(
            rec.fx,
            rec.fy,
            rec.cx,
            rec.cy,
            rec.width,
            rec.height,
            Mat3::from_row_slice(&rec.r),
            Vec3::from_row_slice(&rec.t),
        )
    }
}

pub fn cameras_to_json(cameras: &[Camera]) -> String {
    let recs: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    serde_json::to_string_pretty(&recs).expect("camera records always serialize")
}

pub fn cameras_from_json(text: &str) -> Result<Vec<Camera>> {
    let recs: Vec<CameraRecord> =
        serde_json::from_str(text).map_err(|e| format_err("camera file", e.to_string()))?;
    recs.iter().map(Camera::try_from).collect()
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    std::fs::write(path, cameras_to_json(cameras))?;
    Ok(())
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    cameras_from_json(&std::fs::read_to_string(path)?)
}
