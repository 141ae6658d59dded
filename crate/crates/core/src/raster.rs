//! Depth-sorted alpha compositing of projected Gaussians and its exact
//! reverse-mode derivative.
//!
//! Every pixel composites, front to back, all primitives whose cull box
//! contains it, in increasing camera-space depth of the primitive means
//! (ties broken by storage index). Work is binned into 16x16 tiles only to
//! skip primitives early; the visiting order is the global depth order.

use nalgebra::{Matrix2, Matrix2x3, Vector2};

use crate::camera::{Camera, Mat3, Vec3};
use crate::error::{domain, Result};
use crate::gaussian::{quat_to_matrix, sigmoid, GaussianPrimitive, GaussianScene, Quat};
use crate::image::ImageBuffer;
use crate::par;
use crate::sh::{self, ShOrder};

const TILE: usize = 16;

/// Primitives with `alpha` above this are counted in the blend-count buffer.
pub const BLEND_COUNT_THRESHOLD: f64 = 1.0 / 255.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    /// Screen-space low-pass: adds `dilation` to the diagonal of every 2D covariance.
    pub low_pass: bool,
    /// Pixels squared.
    pub dilation: f64,
    /// Scale the kernel by `sqrt(det(cov) / det(cov + dilation I))` so the
    /// low-pass keeps the splat's integrated weight instead of its peak.
    pub normalize_low_pass: bool,
    pub background: [f64; 3],
    pub record_depth: bool,
    pub record_blend_count: bool,
    /// Compositing stops once transmittance falls below this value.
    pub transmittance_floor: f64,
    /// Per-primitive alpha is clamped to at most this value.
    pub max_alpha: f64,
    /// Cull radius in standard deviations of the major axis; `f64::INFINITY` disables culling.
    pub cull_sigmas: f64,
    /// Primitives with camera depth at or below this are culled.
    pub near: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            low_pass: true,
            dilation: 0.3,
            normalize_low_pass: false,
            background: [0.0; 3],
            record_depth: false,
            record_blend_count: false,
            transmittance_floor: 1e-4,
            max_alpha: 0.999,
            cull_sigmas: 3.0,
            near: 0.01,
        }
    }
}

impl RenderOptions {
    /// Options under which compositing is an exact, smooth function of every
    /// parameter: no culling, no alpha clamp, no early termination.
    pub fn exact() -> Self {
        RenderOptions {
            low_pass: false,
            transmittance_floor: 0.0,
            max_alpha: 1.0,
            cull_sigmas: f64::INFINITY,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.dilation >= 0.0) {
            return Err(domain("low-pass dilation must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.transmittance_floor) {
            return Err(domain("transmittance floor must lie in [0, 1)"));
        }
        if !(self.max_alpha > 0.0 && self.max_alpha <= 1.0) {
            return Err(domain("alpha clamp must lie in (0, 1]"));
        }
        if !(self.cull_sigmas > 0.0) {
            return Err(domain("cull radius must be positive"));
        }
        Ok(())
    }

    fn effective_dilation(&self) -> f64 {
        if self.low_pass {
            self.dilation
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected2D {
    pub mean: Vector2<f64>,
    /// Screen-space covariance after the optional low-pass.
    pub cov: Matrix2<f64>,
    /// Camera-space z of the mean.
    pub depth: f64,
    /// Cull radius in pixels.
    pub radius: f64,
    /// Kernel amplitude factor; 1 unless the normalized low-pass is enabled.
    pub amplitude: f64,
}

/// Local affine approximation of the perspective projection at `pc`.
#[inline]
fn projection_jacobian(camera: &Camera, pc: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * pc.x * iz * iz,
        0.0,
        camera.fy * iz,
        -camera.fy * pc.y * iz * iz,
    )
}

/// Projects a primitive to the image plane; `None` when it is behind the
/// near plane or its screen covariance is degenerate.
pub fn project(prim: &GaussianPrimitive, camera: &Camera, options: &RenderOptions) -> Option<Projected2D> {
    let pc = camera.world_to_camera(&prim.position);
    if !(pc.z > options.near) {
        return None;
    }
    let (mx, my) = camera.project_camera_point(&pc);
    let t = projection_jacobian(camera, &pc) * camera.rotation;
    let raw = t * prim.covariance() * t.transpose();
    let dil = options.effective_dilation();
    let cov = raw + Matrix2::identity() * dil;
    let det = cov.determinant();
    if !(det > 0.0 && det.is_finite()) {
        return None;
    }
    let amplitude = if options.low_pass && options.normalize_low_pass {
        let det_raw = raw.determinant();
        if !(det_raw > 0.0) {
            return None;
        }
        (det_raw / det).sqrt()
    } else {
        1.0
    };
    let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    Some(Projected2D {
        mean: Vector2::new(mx, my),
        cov,
        depth: pc.z,
        radius: options.cull_sigmas * lambda_max.sqrt(),
        amplitude,
    })
}

/// Unnormalized screen-space Gaussian `exp(-d^T cov^-1 d / 2)`, `d = pixel - mean`.
pub fn kernel_response(pixel_center: Vector2<f64>, proj: &Projected2D) -> Option<f64> {
    let inv = proj.cov.try_inverse()?;
    let d = pixel_center - proj.mean;
    Some((-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: ImageBuffer,
    /// Alpha-weighted camera depth per pixel (not normalized by coverage).
    pub depth: Option<Vec<f64>>,
    /// Composited primitives with alpha above [`BLEND_COUNT_THRESHOLD`], per pixel.
    pub blend_count: Option<Vec<u32>>,
}

/// A projected primitive ready for compositing.
#[derive(Clone, Debug)]
struct Splat {
    prim: usize,
    mean: [f64; 2],
    /// Inverse covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    conic: [f64; 3],
    /// `sigmoid(logit) * amplitude`.
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    /// Pixel index ranges `[x0, x1) x [y0, y1)`.
    bbox: [usize; 4],
}

struct Prepared {
    splats: Vec<Splat>,
    tiles_x: usize,
    /// Splat indices per tile, in depth order.
    tiles: Vec<Vec<u32>>,
}

fn pixel_range(center: f64, radius: f64, n: usize) -> (usize, usize) {
    if !radius.is_finite() {
        return (0, n);
    }
    let lo = (center - radius - 0.5).ceil().max(0.0);
    let hi = (center + radius - 0.5).floor() + 1.0;
    let hi = hi.min(n as f64);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn prepare(scene: &GaussianScene, camera: &Camera, options: &RenderOptions) -> Prepared {
    let center = camera.center();
    let order = scene.sh_order;
    let mut splats: Vec<Splat> = par::map_range(scene.primitives.len(), |i| {
        let prim = &scene.primitives[i];
        let proj = project(prim, camera, options)?;
        let (x0, x1) = pixel_range(proj.mean.x, proj.radius, camera.width);
        let (y0, y1) = pixel_range(proj.mean.y, proj.radius, camera.height);
        if x0 >= x1 || y0 >= y1 {
            return None;
        }
        let inv = proj.cov.try_inverse()?;
        let dir = (prim.position - center).normalize();
        Some(Splat {
            prim: i,
            mean: [proj.mean.x, proj.mean.y],
            conic: [inv[(0, 0)], inv[(0, 1)], inv[(1, 1)]],
            opacity: sigmoid(prim.opacity_logit) * proj.amplitude,
            color: prim.color([dir.x, dir.y, dir.z], order),
            depth: proj.depth,
            bbox: [x0, x1, y0, y1],
        })
    })
    .into_iter()
    .flatten()
    .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.prim.cmp(&b.prim)));

    let tiles_x = camera.width.div_ceil(TILE);
    let tiles_y = camera.height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.bbox;
        for ty in y0 / TILE..=(y1 - 1) / TILE {
            for tx in x0 / TILE..=(x1 - 1) / TILE {
                tiles[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    Prepared { splats, tiles_x, tiles }
}

/// One composited contribution at a pixel.
#[derive(Clone, Copy)]
struct Contribution {
    splat: u32,
    alpha: f64,
    kernel: f64,
    transmittance: f64,
    clamped: bool,
}

#[inline]
fn kernel_at(s: &Splat, px: f64, py: f64) -> (f64, f64, f64) {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let [a, b, c] = s.conic;
    let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
    (power.exp(), dx, dy)
}

struct PixelResult {
    color: [f64; 3],
    depth: f64,
    count: u32,
}

/// Front-to-back compositing of one pixel. `record` receives each contribution.
#[inline]
fn composite_pixel(
    x: usize,
    y: usize,
    list: &[u32],
    splats: &[Splat],
    options: &RenderOptions,
    mut record: impl FnMut(Contribution),
) -> PixelResult {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut count = 0;
    for &si in list {
        let s = &splats[si as usize];
        let [x0, x1, y0, y1] = s.bbox;
        if x < x0 || x >= x1 || y < y0 || y >= y1 {
            continue;
        }
        let (k, _, _) = kernel_at(s, px, py);
        let raw = s.opacity * k;
        let clamped = raw > options.max_alpha;
        let alpha = if clamped { options.max_alpha } else { raw };
        let w = alpha * t;
        for c in 0..3 {
            color[c] += s.color[c] * w;
        }
        depth += s.depth * w;
        if alpha > BLEND_COUNT_THRESHOLD {
            count += 1;
        }
        record(Contribution { splat: si, alpha, kernel: k, transmittance: t, clamped });
        t *= 1.0 - alpha;
        if t < options.transmittance_floor {
            break;
        }
    }
    for c in 0..3 {
        color[c] += t * options.background[c];
    }
    PixelResult { color, depth, count }
}

pub fn render(scene: &GaussianScene, camera: &Camera, options: &RenderOptions) -> Result<RenderOutput> {
    options.validate()?;
    let prep = prepare(scene, camera, options);
    let (w, h) = (camera.width, camera.height);
    let mut color = vec![0.0; w * h * 3];
    let mut depth = vec![0.0; w * h];
    let mut count = vec![0u32; w * h];
    // rows are grouped into bands of one tile height
    let mut bands: Vec<(&mut [f64], &mut [f64], &mut [u32])> = color
        .chunks_mut(TILE * w * 3)
        .zip(depth.chunks_mut(TILE * w))
        .zip(count.chunks_mut(TILE * w))
        .map(|((a, b), c)| (a, b, c))
        .collect();
    par::for_each_chunk_mut(&mut bands, 1, |band, slot| {
        let (color, depth, count) = &mut slot[0];
        let y_start = band * TILE;
        let rows = depth.len() / w;
        for ly in 0..rows {
            let y = y_start + ly;
            for x in 0..w {
                let list = &prep.tiles[(y / TILE) * prep.tiles_x + x / TILE];
                let r = composite_pixel(x, y, list, &prep.splats, options, |_| {});
                let i = ly * w + x;
                color[i * 3..i * 3 + 3].copy_from_slice(&r.color);
                depth[i] = r.depth;
                count[i] = r.count;
            }
        }
    });
    Ok(RenderOutput {
        color: ImageBuffer { width: w, height: h, data: color },
        depth: options.record_depth.then_some(depth),
        blend_count: options.record_blend_count.then_some(count),
    })
}

/// Composites a single pixel `(u, v)`; equal to the same pixel of [`render`].
pub fn render_pixel(
    scene: &GaussianScene,
    camera: &Camera,
    options: &RenderOptions,
    u: usize,
    v: usize,
) -> Result<[f64; 3]> {
    options.validate()?;
    if u >= camera.width || v >= camera.height {
        return Err(domain(format!("pixel ({u}, {v}) outside the image")));
    }
    let prep = prepare(scene, camera, options);
    let list = &prep.tiles[(v / TILE) * prep.tiles_x + u / TILE];
    Ok(composite_pixel(u, v, list, &prep.splats, options, |_| {}).color)
}

/// Gradient of a scalar objective with respect to one primitive's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveGrad {
    pub position: Vec3,
    pub log_scale: Vec3,
    pub rotation: Quat,
    pub opacity_logit: f64,
    pub sh: Vec<f64>,
}

impl PrimitiveGrad {
    pub fn zeros(order: ShOrder) -> Self {
        PrimitiveGrad {
            position: Vec3::zeros(),
            log_scale: Vec3::zeros(),
            rotation: Quat::zeros(),
            opacity_logit: 0.0,
            sh: vec![0.0; 3 * order.num_coeffs()],
        }
    }
}

/// Screen-space gradient accumulated per splat: mean (2), conic (3), color (3), opacity (1).
type Grad2d = [f64; 9];

/// Gradient of `sum_pixels <grad_color, render(scene)>` with respect to every
/// primitive parameter, in storage order. Culled primitives get zero gradients.
pub fn render_backward(
    scene: &GaussianScene,
    camera: &Camera,
    options: &RenderOptions,
    grad_color: &ImageBuffer,
) -> Result<Vec<PrimitiveGrad>> {
    options.validate()?;
    if grad_color.width != camera.width || grad_color.height != camera.height {
        return Err(domain(format!(
            "gradient image is {}x{}, camera is {}x{}",
            grad_color.width, grad_color.height, camera.width, camera.height
        )));
    }
    let prep = prepare(scene, camera, options);
    let (w, h) = (camera.width, camera.height);
    let n_bands = h.div_ceil(TILE);
    let n_splats = prep.splats.len();

    let mut band_grads: Vec<Vec<Grad2d>> = vec![Vec::new(); n_bands];
    par::for_each_chunk_mut(&mut band_grads, 1, |band, slot| {
        let mut acc = vec![[0.0; 9]; n_splats];
        let mut contribs: Vec<Contribution> = Vec::new();
        for y in band * TILE..((band + 1) * TILE).min(h) {
            for x in 0..w {
                let g = grad_color.pixel(x, y);
                if g == [0.0; 3] {
                    continue;
                }
                contribs.clear();
                let list = &prep.tiles[(y / TILE) * prep.tiles_x + x / TILE];
                composite_pixel(x, y, list, &prep.splats, options, |c| contribs.push(c));
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                // color composited behind the current splat, normalized by the
                // transmittance just after it
                let mut behind = options.background;
                for c in contribs.iter().rev() {
                    let s = &prep.splats[c.splat as usize];
                    let a = &mut acc[c.splat as usize];
                    let wgt = c.alpha * c.transmittance;
                    let mut d_alpha = 0.0;
                    for ch in 0..3 {
                        a[5 + ch] += g[ch] * wgt;
                        d_alpha += g[ch] * c.transmittance * (s.color[ch] - behind[ch]);
                        behind[ch] = c.alpha * s.color[ch] + (1.0 - c.alpha) * behind[ch];
                    }
                    if c.clamped {
                        continue;
                    }
                    a[8] += d_alpha * c.kernel;
                    let d_k = d_alpha * s.opacity;
                    let (_, dx, dy) = kernel_at(s, px, py);
                    let [ca, cb, cc] = s.conic;
                    let kk = d_k * c.kernel;
                    a[0] += kk * (ca * dx + cb * dy);
                    a[1] += kk * (cb * dx + cc * dy);
                    a[2] += -0.5 * kk * dx * dx;
                    a[3] += -kk * dx * dy;
                    a[4] += -0.5 * kk * dy * dy;
                }
            }
        }
        *slot.first_mut().unwrap() = acc;
    });

    let mut grad2d = vec![[0.0; 9]; n_splats];
    for band in &band_grads {
        for (dst, src) in grad2d.iter_mut().zip(band) {
            for k in 0..9 {
                dst[k] += src[k];
            }
        }
    }

    let mut out = vec![PrimitiveGrad::zeros(scene.sh_order); scene.primitives.len()];
    let chained = par::map_range(n_splats, |si| {
        let s = &prep.splats[si];
        chain_to_primitive(&scene.primitives[s.prim], scene.sh_order, camera, options, &grad2d[si])
    });
    for (s, g) in prep.splats.iter().zip(chained) {
        out[s.prim] = g;
    }
    Ok(out)
}

/// Pulls a screen-space gradient back through projection, covariance,
/// quaternion normalization, the log/logit re-parameterizations and SH decoding.
fn chain_to_primitive(
    prim: &GaussianPrimitive,
    order: ShOrder,
    camera: &Camera,
    options: &RenderOptions,
    g: &Grad2d,
) -> PrimitiveGrad {
    let mut out = PrimitiveGrad::zeros(order);
    let w = camera.rotation;
    let pc = camera.world_to_camera(&prim.position);
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let (fx, fy) = (camera.fx, camera.fy);

    let q_norm = prim.rotation.norm();
    let qh = prim.rotation / q_norm;
    let r = quat_to_matrix(&prim.rotation);
    let s = prim.scale();
    let m = r * Mat3::from_diagonal(&s);
    let sigma3 = m * m.transpose();
    let jac = projection_jacobian(camera, &pc);
    let t = jac * w;
    let raw = t * sigma3 * t.transpose();
    let dil = options.effective_dilation();
    let cov = raw + Matrix2::identity() * dil;
    let conic = cov.try_inverse().unwrap_or_else(Matrix2::zeros);

    let normalize = options.low_pass && options.normalize_low_pass;
    let amplitude = if normalize { (raw.determinant() / cov.determinant()).sqrt() } else { 1.0 };
    let o = sigmoid(prim.opacity_logit);

    // opacity
    let d_opacity = g[8];
    out.opacity_logit = d_opacity * amplitude * o * (1.0 - o);

    // screen covariance
    let g_conic = Matrix2::new(g[2], 0.5 * g[3], 0.5 * g[3], g[4]);
    let mut g_cov = -(conic * g_conic * conic);
    if normalize {
        let d_amp = d_opacity * o;
        let raw_inv = raw.try_inverse().unwrap_or_else(Matrix2::zeros);
        g_cov += (raw_inv - conic) * (0.5 * d_amp * amplitude);
    }
    let g_sigma3: Mat3 = t.transpose() * g_cov * t;
    let g_t = 2.0 * g_cov * t * sigma3;
    let g_j = g_t * w.transpose();

    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut d_pc = Vec3::new(
        g_j[(0, 2)] * (-fx * iz2),
        g_j[(1, 2)] * (-fy * iz2),
        g_j[(0, 0)] * (-fx * iz2)
            + g_j[(0, 2)] * (2.0 * fx * x * iz3)
            + g_j[(1, 1)] * (-fy * iz2)
            + g_j[(1, 2)] * (2.0 * fy * y * iz3),
    );
    let (gmx, gmy) = (g[0], g[1]);
    d_pc.x += gmx * fx * iz;
    d_pc.y += gmy * fy * iz;
    d_pc.z += -gmx * fx * x * iz2 - gmy * fy * y * iz2;
    let mut d_pos = w.transpose() * d_pc;

    // color through SH and the view direction
    let offset = prim.position - camera.center();
    let dist = offset.norm();
    let dir = offset / dist;
    let dir_arr = [dir.x, dir.y, dir.z];
    let raw_color = sh::eval_raw(&prim.sh, dir_arr, order);
    let mut basis = [0.0; 16];
    let mut dbasis = [[0.0; 3]; 16];
    sh::basis(order, dir_arr, &mut basis);
    sh::basis_grad(order, dir_arr, &mut dbasis);
    let mut d_dir = Vec3::zeros();
    for c in 0..3 {
        let gc = g[5 + c];
        if raw_color[c] < 0.0 || gc == 0.0 {
            continue;
        }
        for l in 0..order.num_coeffs() {
            out.sh[l * 3 + c] = gc * basis[l];
            let k = prim.sh[l * 3 + c];
            d_dir += Vec3::new(dbasis[l][0], dbasis[l][1], dbasis[l][2]) * (gc * k);
        }
    }
    d_pos += (d_dir - dir * dir.dot(&d_dir)) / dist;
    out.position = d_pos;

    // covariance factors
    let g_m = 2.0 * g_sigma3 * m;
    for j in 0..3 {
        let mut gs = 0.0;
        for i in 0..3 {
            gs += r[(i, j)] * g_m[(i, j)];
        }
        out.log_scale[j] = s[j] * gs;
    }
    let g_r = g_m * Mat3::from_diagonal(&s);
    let (qw, qx, qy, qz) = (qh[0], qh[1], qh[2], qh[3]);
    let gr = |i: usize, j: usize| g_r[(i, j)];
    let d_qh = Quat::new(
        2.0 * (-qz * gr(0, 1) + qy * gr(0, 2) + qz * gr(1, 0) - qx * gr(1, 2) - qy * gr(2, 0) + qx * gr(2, 1)),
        2.0 * (qy * gr(0, 1) + qz * gr(0, 2) + qy * gr(1, 0) - 2.0 * qx * gr(1, 1) - qw * gr(1, 2)
            + qz * gr(2, 0)
            + qw * gr(2, 1)
            - 2.0 * qx * gr(2, 2)),
        2.0 * (-2.0 * qy * gr(0, 0) + qx * gr(0, 1) + qw * gr(0, 2) + qx * gr(1, 0) + qz * gr(1, 2)
            - qw * gr(2, 0)
            + qz * gr(2, 1)
            - 2.0 * qy * gr(2, 2)),
        2.0 * (-2.0 * qz * gr(0, 0) - qw * gr(0, 1) + qx * gr(0, 2) + qw * gr(1, 0) - 2.0 * qz * gr(1, 1)
            + qy * gr(1, 2)
            + qx * gr(2, 0)
            + qy * gr(2, 1)),
    );
    out.rotation = (d_qh - qh * qh.dot(&d_qh)) / q_norm;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(w: usize, h: usize, f: f64) -> Camera {
        Camera::identity(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    fn iso(pos: Vec3, scale: f64, opacity: f64, rgb: [f64; 3]) -> GaussianPrimitive {
        GaussianPrimitive::isotropic(pos, scale, opacity, rgb, ShOrder::new(0).unwrap())
    }

    #[test]
    fn projected_covariance_on_axis() {
        let camera = cam(64, 64, 50.0);
        let opts = RenderOptions { low_pass: false, ..Default::default() };
        let (s, z) = (0.2, 4.0);
        let p = project(&iso(Vec3::new(0.0, 0.0, z), s, 0.5, [1.0; 3]), &camera, &opts).unwrap();
        let expected = (50.0 * s / z).powi(2);
        assert!((p.cov[(0, 0)] - expected).abs() < 1e-12);
        assert!((p.cov[(1, 1)] - expected).abs() < 1e-12);
        assert!(p.cov[(0, 1)].abs() < 1e-15);
        let far = project(&iso(Vec3::new(0.0, 0.0, 2.0 * z), s, 0.5, [1.0; 3]), &camera, &opts).unwrap();
        assert!((far.cov[(0, 0)].sqrt() - 0.5 * p.cov[(0, 0)].sqrt()).abs() < 1e-12);
        assert_eq!(p.mean, Vector2::new(32.0, 32.0));
    }

    #[test]
    fn low_pass_adds_dilation() {
        let camera = cam(64, 64, 50.0);
        let prim = iso(Vec3::new(0.3, -0.2, 3.0), 0.1, 0.5, [1.0; 3]);
        let off = project(&prim, &camera, &RenderOptions { low_pass: false, ..Default::default() }).unwrap();
        let on = project(&prim, &camera, &RenderOptions { low_pass: true, dilation: 0.3, ..Default::default() })
            .unwrap();
        assert!((on.cov[(0, 0)] - off.cov[(0, 0)] - 0.3).abs() < 1e-12);
        assert!((on.cov[(1, 1)] - off.cov[(1, 1)] - 0.3).abs() < 1e-12);
        assert_eq!(on.cov[(0, 1)], off.cov[(0, 1)]);
    }

    #[test]
    fn behind_camera_is_culled() {
        let camera = cam(32, 32, 30.0);
        let opts = RenderOptions::default();
        assert!(project(&iso(Vec3::new(0.0, 0.0, -1.0), 0.1, 0.5, [1.0; 3]), &camera, &opts).is_none());
        assert!(project(&iso(Vec3::new(0.0, 0.0, 0.01), 0.1, 0.5, [1.0; 3]), &camera, &opts).is_none());
    }

    #[test]
    fn kernel_values() {
        let proj = Projected2D {
            mean: Vector2::new(1.0, 2.0),
            cov: Matrix2::identity(),
            depth: 1.0,
            radius: 3.0,
            amplitude: 1.0,
        };
        assert_eq!(kernel_response(Vector2::new(1.0, 2.0), &proj), Some(1.0));
        let k = kernel_response(Vector2::new(2.0, 2.0), &proj).unwrap();
        assert!((k - (-0.5f64).exp()).abs() < 1e-15);
        let k3 = kernel_response(Vector2::new(1.0, 5.0), &proj).unwrap();
        assert!((k3 - (-4.5f64).exp()).abs() < 1e-15);
        assert!((k3 - 0.0111).abs() < 1e-4);
        let singular = Projected2D { cov: Matrix2::zeros(), ..proj };
        assert_eq!(kernel_response(Vector2::new(0.0, 0.0), &singular), None);
    }

    fn wide(pos: Vec3, opacity: f64, rgb: [f64; 3]) -> GaussianPrimitive {
        iso(pos, 1e3, opacity, rgb)
    }

    #[test]
    fn two_half_transparent_layers() {
        let camera = cam(4, 4, 10.0);
        let scene = GaussianScene::with_primitives(
            ShOrder::new(0).unwrap(),
            vec![
                wide(Vec3::new(0.0, 0.0, 5.0), 0.5, [0.0, 0.0, 1.0]),
                wide(Vec3::new(0.0, 0.0, 2.0), 0.5, [1.0, 0.0, 0.0]),
            ],
        );
        let opts = RenderOptions { low_pass: false, ..Default::default() };
        let out = render(&scene, &camera, &opts).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let p = out.color.pixel(x, y);
                assert!((p[0] - 0.5).abs() < 1e-6 && p[1].abs() < 1e-12 && (p[2] - 0.25).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn opaque_primitive_shows_its_color() {
        let camera = cam(4, 4, 10.0);
        let scene = GaussianScene::with_primitives(
            ShOrder::new(0).unwrap(),
            vec![wide(Vec3::new(0.0, 0.0, 3.0), 1.0 - 1e-12, [0.2, 0.7, 0.4])],
        );
        let opts = RenderOptions { max_alpha: 1.0, ..RenderOptions::exact() };
        let out = render(&scene, &camera, &opts).unwrap();
        let p = out.color.pixel(1, 2);
        assert!((p[0] - 0.2).abs() < 1e-7 && (p[1] - 0.7).abs() < 1e-7 && (p[2] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn empty_scene_is_background() {
        let camera = cam(5, 3, 10.0);
        let scene = GaussianScene::new(ShOrder::new(1).unwrap());
        let opts = RenderOptions { background: [0.1, 0.2, 0.3], ..Default::default() };
        let out = render(&scene, &camera, &opts).unwrap();
        assert_eq!(out.color, ImageBuffer::filled(5, 3, [0.1, 0.2, 0.3]));
    }

    #[test]
    fn centered_primitive_alpha_equals_opacity() {
        // pixel (8, 8) has its center on the optical axis
        let camera = Camera::identity(40.0, 40.0, 8.5, 8.5, 16, 16).unwrap();
        let prim = iso(Vec3::new(0.0, 0.0, 4.0), 0.05, 0.37, [1.0, 1.0, 1.0]);
        let scene = GaussianScene::with_primitives(ShOrder::new(0).unwrap(), vec![prim]);
        let px = render_pixel(&scene, &camera, &RenderOptions::exact(), 8, 8).unwrap();
        assert!((px[0] - 0.37).abs() < 1e-15);
    }

    #[test]
    fn render_pixel_matches_render() {
        let camera = cam(20, 20, 20.0);
        let scene = GaussianScene::with_primitives(
            ShOrder::new(0).unwrap(),
            vec![
                iso(Vec3::new(0.1, 0.0, 2.0), 0.1, 0.6, [1.0, 0.0, 0.0]),
                iso(Vec3::new(-0.1, 0.05, 3.0), 0.2, 0.8, [0.0, 1.0, 0.0]),
            ],
        );
        let opts = RenderOptions::default();
        let img = render(&scene, &camera, &opts).unwrap().color;
        for (u, v) in [(10, 10), (3, 17), (12, 9)] {
            assert_eq!(render_pixel(&scene, &camera, &opts, u, v).unwrap(), img.pixel(u, v));
        }
    }

    #[test]
    fn zero_gradient_image_gives_zero_gradients() {
        let camera = cam(8, 8, 10.0);
        let scene = GaussianScene::with_primitives(
            ShOrder::new(1).unwrap(),
            vec![GaussianPrimitive::isotropic(Vec3::new(0.0, 0.0, 2.0), 0.3, 0.5, [0.3; 3], ShOrder::new(1).unwrap())],
        );
        let g = render_backward(&scene, &camera, &RenderOptions::default(), &ImageBuffer::new(8, 8)).unwrap();
        assert_eq!(g[0], PrimitiveGrad::zeros(ShOrder::new(1).unwrap()));
        assert!(render_backward(&scene, &camera, &RenderOptions::default(), &ImageBuffer::new(7, 8)).is_err());
    }

    #[test]
    fn invalid_options_are_rejected() {
        let camera = cam(4, 4, 10.0);
        let scene = GaussianScene::new(ShOrder::new(0).unwrap());
        let bad = RenderOptions { transmittance_floor: 1.0, ..Default::default() };
        assert!(render(&scene, &camera, &bad).is_err());
        let bad = RenderOptions { dilation: -1.0, ..Default::default() };
        assert!(render(&scene, &camera, &bad).is_err());
    }
}
