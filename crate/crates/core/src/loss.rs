//! Photometric loss: weighted mean absolute error plus structural dissimilarity.

use crate::error::Result;
use crate::image::ImageBuffer;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian taps of odd length `size`.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Mirror index without repeating the edge sample (`-1 → 1`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Separable blur of a single-channel plane with reflect padding.
struct Blur {
    taps: Vec<f64>,
    width: usize,
    height: usize,
}

impl Blur {
    fn pass(&self, src: &[f64], horizontal: bool, transpose: bool) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let r = (self.taps.len() / 2) as isize;
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                for (k, &g) in self.taps.iter().enumerate() {
                    let off = k as isize - r;
                    let (sx, sy) = if horizontal {
                        (reflect(x as isize + off, w), y)
                    } else {
                        (x, reflect(y as isize + off, h))
                    };
                    if transpose {
                        out[sy * w + sx] += g * v;
                    } else {
                        out[y * w + x] += g * src[sy * w + sx];
                    }
                }
            }
        }
        out
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        self.pass(&self.pass(src, true, false), false, false)
    }

    fn apply_transpose(&self, src: &[f64]) -> Vec<f64> {
        self.pass(&self.pass(src, false, true), true, true)
    }
}

fn channel(img: &ImageBuffer, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM over pixels and channels and, optionally, its gradient with
/// respect to `x`.
fn ssim_impl(x: &ImageBuffer, y: &ImageBuffer, want_grad: bool) -> Result<(f64, Option<ImageBuffer>)> {
    x.check_dims(y)?;
    let (w, h) = (x.width, x.height);
    let n = w * h;
    let blur = Blur { taps: gaussian_taps(SSIM_WINDOW, SSIM_SIGMA), width: w, height: h };
    let mut total = 0.0;
    let mut grad = want_grad.then(|| ImageBuffer::new(w, h));
    let norm = 1.0 / (3 * n) as f64;
    for c in 0..3 {
        let xs = channel(x, c);
        let ys = channel(y, c);
        let mx = blur.apply(&xs);
        let my = blur.apply(&ys);
        let exx = blur.apply(&xs.iter().map(|a| a * a).collect::<Vec<_>>());
        let eyy = blur.apply(&ys.iter().map(|a| a * a).collect::<Vec<_>>());
        let exy = blur.apply(&xs.iter().zip(&ys).map(|(a, b)| a * b).collect::<Vec<_>>());
        let mut g_mu = vec![0.0; n];
        let mut g_xy = vec![0.0; n];
        let mut g_xx = vec![0.0; n];
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                g_mu[i] = norm * s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
                g_xy[i] = norm * s * 2.0 / a2;
                g_xx[i] = -norm * s / b2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let t_mu = blur.apply_transpose(&g_mu);
            let t_xy = blur.apply_transpose(&g_xy);
            let t_xx = blur.apply_transpose(&g_xx);
            for i in 0..n {
                g.data[i * 3 + c] = t_mu[i] + ys[i] * t_xy[i] + 2.0 * xs[i] * t_xx[i];
            }
        }
    }
    Ok((total * norm, grad))
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5) and reflect padding.
pub fn ssim(x: &ImageBuffer, y: &ImageBuffer) -> Result<f64> {
    Ok(ssim_impl(x, y, false)?.0)
}

pub fn ssim_with_grad(x: &ImageBuffer, y: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    let (s, g) = ssim_impl(x, y, true)?;
    Ok((s, g.expect("gradient requested")))
}

pub fn mean_abs_error(x: &ImageBuffer, y: &ImageBuffer) -> Result<f64> {
    x.check_dims(y)?;
    Ok(x.data.iter().zip(&y.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.data.len() as f64)
}

/// `(1 − λ)·MAE + λ·(1 − SSIM)` and its gradient with respect to `render`.
pub fn photometric_loss(render: &ImageBuffer, gt: &ImageBuffer, lambda_dssim: f64) -> Result<(f64, ImageBuffer)> {
    render.check_dims(gt)?;
    let n = render.data.len() as f64;
    let mut grad = ImageBuffer::new(render.width, render.height);
    let mut mae = 0.0;
    for ((g, a), b) in grad.data.iter_mut().zip(&render.data).zip(&gt.data) {
        let d = a - b;
        mae += d.abs();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = (1.0 - lambda_dssim) * sign / n;
    }
    mae /= n;
    let mut loss = (1.0 - lambda_dssim) * mae;
    if lambda_dssim != 0.0 {
        let (s, gs) = ssim_with_grad(render, gt)?;
        loss += lambda_dssim * (1.0 - s);
        for (g, d) in grad.data.iter_mut().zip(&gs.data) {
            *g -= lambda_dssim * d;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageBuffer {
        let data = (0..w * h * 3).map(|_| rng.gen::<f64>()).collect();
        ImageBuffer::from_data(w, h, data).unwrap()
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(t[i], t[10 - i]);
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(-7, 1), 0);
    }

    #[test]
    fn transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w, h) = (9, 6);
        let blur = Blur { taps: gaussian_taps(11, 1.5), width: w, height: h };
        let a: Vec<f64> = (0..w * h).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..w * h).map(|_| rng.gen()).collect();
        let lhs: f64 = blur.apply(&a).iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(blur.apply_transpose(&b)).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 8, 8);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let (l, g) = photometric_loss(&a, &a, 0.2).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.data.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn pure_mae_offset() {
        let a = ImageBuffer::filled(5, 4, [0.3, 0.4, 0.5]);
        let b = ImageBuffer::filled(5, 4, [0.4, 0.5, 0.6]);
        let (l, _) = photometric_loss(&a, &b, 0.0).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
        assert!(photometric_loss(&a, &ImageBuffer::new(4, 5), 0.2).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 8, 8);
        let y = random_image(&mut rng, 8, 8);
        for lambda in [0.0, 0.2, 1.0] {
            let (_, g) = photometric_loss(&x, &y, lambda).unwrap();
            let h = 1e-6;
            for i in 0..x.data.len() {
                let mut p = x.clone();
                p.data[i] += h;
                let mut m = x.clone();
                m.data[i] -= h;
                let fd = (photometric_loss(&p, &y, lambda).unwrap().0 - photometric_loss(&m, &y, lambda).unwrap().0)
                    / (2.0 * h);
                let rel = (fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-6);
                assert!(rel < 1e-3, "λ={lambda} i={i}: fd {fd} vs {}", g.data[i]);
            }
        }
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(&mut rng, 12, 7);
        let b = random_image(&mut rng, 12, 7);
        let s = ssim(&a, &b).unwrap();
        assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(s < 1.0 && s > -1.0);
    }
}
