//! Real spherical-harmonics color, using the sign and normalization
//! conventions of common 3D Gaussian splatting viewers.
//!
//! Coefficients are stored coefficient-major: `coeffs[l * 3 + c]` is basis
//! function `l` for channel `c`. Decoded color is `max(0, sum + 0.5)`.

use crate::error::{domain, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ShOrder(u8);

impl ShOrder {
    pub fn new(order: u8) -> Result<Self> {
        if order > 3 {
            return Err(domain(format!("SH order must be 0..=3, got {order}")));
        }
        Ok(ShOrder(order))
    }

    pub fn order(self) -> u8 {
        self.0
    }

    /// Coefficients per channel, `(order + 1)^2`.
    pub fn num_coeffs(self) -> usize {
        (self.0 as usize + 1).pow(2)
    }

    /// Order with `n` coefficients per channel, if `n` is a perfect square up to 16.
    pub fn from_num_coeffs(n: usize) -> Option<Self> {
        (0..=3u8).map(ShOrder).find(|o| o.num_coeffs() == n)
    }
}

impl Default for ShOrder {
    fn default() -> Self {
        ShOrder(1)
    }
}

/// Encodes an RGB color into a dc-only coefficient set that decodes back to it.
pub fn rgb_to_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / SH_C0)
}

pub fn dc_to_rgb(dc: [f64; 3]) -> [f64; 3] {
    dc.map(|k| (SH_C0 * k + 0.5).max(0.0))
}

/// Basis values `Y_l(dir)` for `l < order.num_coeffs()`, written into `out`.
pub fn basis(order: ShOrder, dir: [f64; 3], out: &mut [f64; 16]) {
    let [x, y, z] = dir;
    out[0] = SH_C0;
    if order.0 < 1 {
        return;
    }
    out[1] = -SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = -SH_C1 * x;
    if order.0 < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = SH_C2[0] * x * y;
    out[5] = SH_C2[1] * y * z;
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    out[7] = SH_C2[3] * x * z;
    out[8] = SH_C2[4] * (xx - yy);
    if order.0 < 3 {
        return;
    }
    out[9] = SH_C3[0] * y * (3.0 * xx - yy);
    out[10] = SH_C3[1] * x * y * z;
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = SH_C3[5] * z * (xx - yy);
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
}

/// Partial derivatives of each basis polynomial with respect to `(x, y, z)`.
pub fn basis_grad(order: ShOrder, dir: [f64; 3], out: &mut [[f64; 3]; 16]) {
    let [x, y, z] = dir;
    out[0] = [0.0; 3];
    if order.0 < 1 {
        return;
    }
    out[1] = [0.0, -SH_C1, 0.0];
    out[2] = [0.0, 0.0, SH_C1];
    out[3] = [-SH_C1, 0.0, 0.0];
    if order.0 < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
    out[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
    out[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
    out[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
    out[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
    if order.0 < 3 {
        return;
    }
    out[9] = [SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
    out[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
    out[11] = [
        SH_C3[2] * (-2.0 * x * y),
        SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
        SH_C3[2] * 8.0 * y * z,
    ];
    out[12] = [
        SH_C3[3] * (-6.0 * x * z),
        SH_C3[3] * (-6.0 * y * z),
        SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    ];
    out[13] = [
        SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
        SH_C3[4] * (-2.0 * x * y),
        SH_C3[4] * 8.0 * x * z,
    ];
    out[14] = [SH_C3[5] * 2.0 * x * z, SH_C3[5] * (-2.0 * y * z), SH_C3[5] * (xx - yy)];
    out[15] = [SH_C3[6] * (3.0 * xx - 3.0 * yy), SH_C3[6] * (-6.0 * x * y), 0.0];
}

fn check_len(coeffs: &[f64], order: ShOrder) -> Result<()> {
    if coeffs.len() != 3 * order.num_coeffs() {
        return Err(domain(format!(
            "expected {} SH coefficients for order {}, got {}",
            3 * order.num_coeffs(),
            order.0,
            coeffs.len()
        )));
    }
    Ok(())
}

/// Unclamped `sum_l k_l Y_l(dir) + 0.5` per channel.
#[inline]
pub(crate) fn eval_raw(coeffs: &[f64], dir: [f64; 3], order: ShOrder) -> [f64; 3] {
    let mut y = [0.0; 16];
    basis(order, dir, &mut y);
    let mut rgb = [0.5; 3];
    for (l, yl) in y.iter().enumerate().take(order.num_coeffs()) {
        for c in 0..3 {
            rgb[c] += coeffs[l * 3 + c] * yl;
        }
    }
    rgb
}

pub fn eval_sh(coeffs: &[f64], dir: [f64; 3], order: ShOrder) -> Result<[f64; 3]> {
    check_len(coeffs, order)?;
    Ok(eval_raw(coeffs, dir, order).map(|c| c.max(0.0)))
}

/// Jacobians of [`eval_sh`].
#[derive(Clone, Debug, PartialEq)]
pub struct ShGrad {
    /// `d_coeffs[l * 3 + c]` is `d rgb[c] / d coeffs[l * 3 + c]`; cross-channel terms are zero.
    pub d_coeffs: Vec<f64>,
    /// `d_dir[c]` is `d rgb[c] / d dir`.
    pub d_dir: [[f64; 3]; 3],
}

pub fn eval_sh_grad(coeffs: &[f64], dir: [f64; 3], order: ShOrder) -> Result<ShGrad> {
    check_len(coeffs, order)?;
    let raw = eval_raw(coeffs, dir, order);
    let n = order.num_coeffs();
    let mut y = [0.0; 16];
    let mut dy = [[0.0; 3]; 16];
    basis(order, dir, &mut y);
    basis_grad(order, dir, &mut dy);
    let mut d_coeffs = vec![0.0; 3 * n];
    let mut d_dir = [[0.0; 3]; 3];
    for c in 0..3 {
        if raw[c] < 0.0 {
            continue;
        }
        for l in 0..n {
            d_coeffs[l * 3 + c] = y[l];
            for k in 0..3 {
                d_dir[c][k] += coeffs[l * 3 + c] * dy[l][k];
            }
        }
    }
    Ok(ShGrad { d_coeffs, d_dir })
}
