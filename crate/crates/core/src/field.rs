//! Volumetric density + color fields, ray marching and median depth.
//!
//! Two fields are provided: [`AnalyticField`], a closed-form union of shapes
//! used as a noise-free stand-in for a trained field, and [`DenseGridField`],
//! a stack of dense trilinear grids that can be fit to posed images with
//! [`train_grid`].
//!
//! # Grid checkpoint layout
//!
//! All numbers little-endian.
//!
//! | bytes            | content                                              |
//! |------------------|------------------------------------------------------|
//! | 8                | magic `CGRID001`                                     |
//! | 4 (u32)          | level count `L`                                      |
//! | 4·L (u32)        | vertices per axis for each level                     |
//! | 48 (6 × f64)     | bounds `min.x min.y min.z max.x max.y max.z`         |
//! | payload (f32)    | per level, `res³ × 4` values                         |
//!
//! Within a level, value `c` of vertex `(x, y, z)` sits at
//! `((z·res + y)·res + x)·4 + c`. Channel 0 is the density logit, channels
//! 1..=3 are color logits. Values are held as f64 in memory and rounded to f32
//! on save.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{Camera, Ray, Vec3};
use crate::error::{domain, format_err, Error, Result};
use crate::gaussian::sigmoid;
use crate::image::ImageBuffer;
use crate::par;

/// Closest distance at which marching starts when the camera is inside the bounds.
pub const MIN_T_NEAR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub density: f64,
    pub rgb: [f64; 3],
}

impl FieldSample {
    pub const EMPTY: FieldSample = FieldSample { density: 0.0, rgb: [0.0; 3] };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !(0..3).all(|i| min[i].is_finite() && max[i].is_finite() && min[i] < max[i]) {
            return Err(domain(format!("degenerate box {min:?} .. {max:?}")));
        }
        Ok(Aabb { min, max })
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn size(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }

    /// Grows every side by `frac` of the box size.
    pub fn padded(&self, frac: f64) -> Aabb {
        let pad = self.size() * frac;
        Aabb { min: self.min - pad, max: self.max + pad }
    }

    /// Parameter interval `[t0, t1]` where the ray is inside the box.
    /// `t0` may be negative when the origin is inside.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let o = ray.origin[i];
            let d = ray.direction[i];
            if d == 0.0 {
                if o < self.min[i] || o > self.max[i] {
                    return None;
                }
                continue;
            }
            let a = (self.min[i] - o) / d;
            let b = (self.max[i] - o) / d;
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1).then_some((t0, t1))
    }

    /// Box around every camera frustum truncated at `[near, far]`, padded by 10%.
    pub fn from_frustums(cameras: &[Camera], near: f64, far: f64) -> Result<Aabb> {
        if cameras.is_empty() || !(0.0 < near && near < far) {
            return Err(domain("frustum bounds need cameras and 0 < near < far"));
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for cam in cameras {
            let (w, h) = (cam.width as f64, cam.height as f64);
            for (x, y) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
                let d = cam.direction_at(x, y);
                // distance along the ray for a given camera-space depth
                let cos = cam.rotation.row(2).transpose().dot(&d);
                for depth in [near, far] {
                    let p = cam.center() + d * (depth / cos);
                    lo = lo.inf(&p);
                    hi = hi.sup(&p);
                }
            }
        }
        Ok(Aabb::new(lo, hi)?.padded(0.1))
    }
}

/// A sampleable density and color field.
pub trait RadianceField: Sync {
    /// Density and color at `point` seen from direction `dir`. A zero
    /// direction is allowed and asks for the view-independent color.
    fn sample(&self, point: &Vec3, dir: &Vec3) -> FieldSample;

    fn bounds(&self) -> Aabb;
}

// ---------------------------------------------------------------------------
// Analytic field

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { min: Vec3, max: Vec3 },
    /// Points with `lo <= normal · p <= hi`. `normal` is unit length.
    Slab { normal: Vec3, lo: f64, hi: f64 },
}

impl Shape {
    /// Signed distance, negative inside.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
            Shape::Box { min, max } => {
                let c = (min + max) / 2.0;
                let h = (max - min) / 2.0;
                let q = (p - c).abs() - h;
                let outside = q.sup(&Vec3::zeros()).norm();
                outside + q.max().min(0.0)
            }
            Shape::Slab { normal, lo, hi } => {
                let s = normal.dot(p);
                (lo - s).max(s - hi)
            }
        }
    }

    fn bounding_box(&self) -> Option<Aabb> {
        match self {
            Shape::Sphere { center, radius } => {
                Some(Aabb { min: center - Vec3::repeat(*radius), max: center + Vec3::repeat(*radius) })
            }
            Shape::Box { min, max } => Some(Aabb { min: *min, max: *max }),
            Shape::Slab { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ColorPattern {
    Constant([f64; 3]),
    /// 3D checkerboard with cubes of side `period`.
    Checker { a: [f64; 3], b: [f64; 3], period: f64 },
    /// Smooth blend between `a` and `b` by a product of sines with the given period.
    Waves { a: [f64; 3], b: [f64; 3], period: f64 },
}

impl ColorPattern {
    pub fn at(&self, p: &Vec3) -> [f64; 3] {
        match self {
            ColorPattern::Constant(c) => *c,
            ColorPattern::Checker { a, b, period } => {
                let parity: i64 = (0..3).map(|i| (p[i] / period).floor() as i64).sum();
                if parity.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            ColorPattern::Waves { a, b, period } => {
                let k = std::f64::consts::TAU / period;
                let w = 0.5 + 0.5 * (k * p.x).sin() * (k * p.y).sin() * (k * p.z).sin();
                [0, 1, 2].map(|i| a[i] + w * (b[i] - a[i]))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldShape {
    pub shape: Shape,
    pub density: f64,
    pub color: ColorPattern,
    /// Width of the smooth density ramp across the surface; 0 gives a hard edge.
    pub softness: f64,
}

impl FieldShape {
    pub fn new(shape: Shape, density: f64, color: ColorPattern) -> Self {
        FieldShape { shape, density, color, softness: 0.0 }
    }

    pub fn with_softness(mut self, softness: f64) -> Self {
        self.softness = softness;
        self
    }

    fn occupancy(&self, p: &Vec3) -> f64 {
        let sd = self.shape.signed_distance(p);
        if self.softness <= 0.0 {
            return if sd <= 0.0 { 1.0 } else { 0.0 };
        }
        let x = (0.5 - sd / self.softness).clamp(0.0, 1.0);
        x * x * x * (x * (6.0 * x - 15.0) + 10.0)
    }
}

/// Union of shapes; overlapping densities add and colors mix by density.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticField {
    pub shapes: Vec<FieldShape>,
    pub bounds: Aabb,
}

impl AnalyticField {
    pub fn new(shapes: Vec<FieldShape>, bounds: Aabb) -> Result<Self> {
        for s in &shapes {
            if !(s.density.is_finite() && s.density >= 0.0) {
                return Err(domain(format!("shape density must be finite and >= 0, got {}", s.density)));
            }
            if !(s.softness.is_finite() && s.softness >= 0.0) {
                return Err(domain("shape softness must be finite and >= 0"));
            }
            if let Shape::Slab { normal, .. } = &s.shape {
                if (normal.norm() - 1.0).abs() > 1e-9 {
                    return Err(domain("slab normal must be unit length"));
                }
            }
        }
        Ok(AnalyticField { shapes, bounds })
    }

    /// Bounds taken from the shapes' extents (padded 10%); slabs are clipped
    /// to the box of the other shapes, or to `[-1, 1]³` if there are none.
    pub fn with_auto_bounds(shapes: Vec<FieldShape>) -> Result<Self> {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for s in &shapes {
            if let Some(b) = s.shape.bounding_box() {
                let pad = Vec3::repeat(s.softness);
                lo = lo.inf(&(b.min - pad));
                hi = hi.sup(&(b.max + pad));
            }
        }
        let bounds = if lo.x.is_finite() {
            Aabb::new(lo, hi)?.padded(0.1)
        } else {
            Aabb { min: Vec3::repeat(-1.0), max: Vec3::repeat(1.0) }
        };
        Self::new(shapes, bounds)
    }

    pub fn empty(bounds: Aabb) -> Self {
        AnalyticField { shapes: Vec::new(), bounds }
    }
}

impl RadianceField for AnalyticField {
    fn sample(&self, point: &Vec3, _dir: &Vec3) -> FieldSample {
        if !self.bounds.contains(point) {
            return FieldSample::EMPTY;
        }
        let mut density = 0.0;
        let mut rgb = [0.0; 3];
        for s in &self.shapes {
            let d = s.density * s.occupancy(point);
            if d > 0.0 {
                let c = s.color.at(point);
                for k in 0..3 {
                    rgb[k] += d * c[k];
                }
                density += d;
            }
        }
        if density > 0.0 {
            for c in &mut rgb {
                *c /= density;
            }
        }
        FieldSample { density, rgb }
    }

    fn bounds(&self) -> Aabb {
        self.bounds
    }
}

// ---------------------------------------------------------------------------
// Dense grid field

pub const GRID_CHANNELS: usize = 4;
const GRID_MAGIC: &[u8; 8] = b"CGRID001";

#[derive(Clone, Debug, PartialEq)]
pub struct GridLevel {
    /// Vertices per axis.
    pub resolution: usize,
    /// `resolution³ × 4` values, layout as in the module docs.
    pub values: Vec<f64>,
}

/// Sum of trilinear grids; density is `exp` of channel 0 and color is the
/// sigmoid of channels 1..=3. Color does not depend on view direction.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGridField {
    pub bounds: Aabb,
    pub levels: Vec<GridLevel>,
}

/// The 8 vertices around a point in one level and their trilinear weights.
struct Corners {
    index: [usize; 8],
    weight: [f64; 8],
}

impl DenseGridField {
    /// Density starts near `1e-2` everywhere and color at mid gray.
    pub fn new(bounds: Aabb, resolutions: &[usize]) -> Result<Self> {
        if resolutions.is_empty() {
            return Err(domain("grid needs at least one level"));
        }
        if resolutions.iter().any(|&r| r < 2) {
            return Err(domain("grid resolution must be at least 2"));
        }
        if resolutions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(domain("grid resolutions must be strictly increasing"));
        }
        let per_level = (0.01f64).ln() / resolutions.len() as f64;
        let levels = resolutions
            .iter()
            .map(|&r| {
                let mut values = vec![0.0; r * r * r * GRID_CHANNELS];
                for v in values.chunks_mut(GRID_CHANNELS) {
                    v[0] = per_level;
                }
                GridLevel { resolution: r, values }
            })
            .collect();
        Ok(DenseGridField { bounds, levels })
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.resolution).collect()
    }

    pub fn num_params(&self) -> usize {
        self.levels.iter().map(|l| l.values.len()).sum()
    }

    fn corners(&self, level: &GridLevel, p: &Vec3) -> Corners {
        let r = level.resolution;
        let size = self.bounds.size();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for i in 0..3 {
            let g = ((p[i] - self.bounds.min[i]) / size[i] * (r - 1) as f64).clamp(0.0, (r - 1) as f64);
            let i0 = (g.floor() as usize).min(r - 2);
            base[i] = i0;
            frac[i] = g - i0 as f64;
        }
        let mut index = [0; 8];
        let mut weight = [0.0; 8];
        for (k, (idx, w)) in index.iter_mut().zip(weight.iter_mut()).enumerate() {
            let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            *idx = ((base[2] + dz) * r + base[1] + dy) * r + base[0] + dx;
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            *w = wx * wy * wz;
        }
        Corners { index, weight }
    }

    /// Summed pre-activation channels at `p`, or `None` outside the bounds.
    pub fn raw(&self, p: &Vec3) -> Option<[f64; GRID_CHANNELS]> {
        if !self.bounds.contains(p) {
            return None;
        }
        let mut out = [0.0; GRID_CHANNELS];
        for level in &self.levels {
            let c = self.corners(level, p);
            for (&idx, &w) in c.index.iter().zip(&c.weight) {
                let v = &level.values[idx * GRID_CHANNELS..(idx + 1) * GRID_CHANNELS];
                for ch in 0..GRID_CHANNELS {
                    out[ch] += w * v[ch];
                }
            }
        }
        Some(out)
    }

    fn activate(raw: [f64; GRID_CHANNELS]) -> FieldSample {
        FieldSample { density: raw[0].exp(), rgb: [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])] }
    }

    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.levels.len());
        let mut acc = 0;
        for l in &self.levels {
            out.push(acc);
            acc += l.values.len();
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&(self.levels.len() as u32).to_le_bytes())?;
        for l in &self.levels {
            w.write_all(&(l.resolution as u32).to_le_bytes())?;
        }
        for v in self.bounds.min.iter().chain(self.bounds.max.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        for l in &self.levels {
            let mut buf = Vec::with_capacity(l.values.len() * 4);
            for v in &l.values {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| format_err("grid checkpoint", m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != GRID_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
        let n = u32::from_le_bytes(u32buf) as usize;
        if n == 0 || n > 16 {
            return Err(bad("level count out of range"));
        }
        let mut res = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
            res.push(u32::from_le_bytes(u32buf) as usize);
        }
        if res.iter().any(|&x| !(2..=1024).contains(&x)) {
            return Err(bad("resolution out of range"));
        }
        let mut b = [0.0; 6];
        for v in &mut b {
            let mut f = [0u8; 8];
            r.read_exact(&mut f).map_err(|_| bad("truncated header"))?;
            *v = f64::from_le_bytes(f);
        }
        let bounds = Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]))
            .map_err(|_| bad("degenerate bounds"))?;
        let mut field = DenseGridField::new(bounds, &res).map_err(|e| bad(&e.to_string()))?;
        for l in &mut field.levels {
            let mut bytes = vec![0u8; l.values.len() * 4];
            r.read_exact(&mut bytes).map_err(|_| bad("truncated payload"))?;
            for (v, c) in l.values.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
            }
        }
        Ok(field)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

impl RadianceField for DenseGridField {
    fn sample(&self, point: &Vec3, _dir: &Vec3) -> FieldSample {
        match self.raw(point) {
            Some(raw) => Self::activate(raw),
            None => FieldSample::EMPTY,
        }
    }

    fn bounds(&self) -> Aabb {
        self.bounds
    }
}

// ---------------------------------------------------------------------------
// Marching

/// Where inside each segment the field is sampled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SamplePlacement {
    #[default]
    Start,
    Midpoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarchResult {
    /// Sample distance in each segment.
    pub t: Vec<f64>,
    /// Segment length.
    pub step: f64,
    pub density: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
    /// Transmittance before each segment's absorption; starts at 1.
    pub transmittance: Vec<f64>,
    /// Transmittance after the last segment.
    pub final_transmittance: f64,
    /// Composited color without background.
    pub color: [f64; 3],
}

impl MarchResult {
    pub fn color_over(&self, background: [f64; 3]) -> [f64; 3] {
        let mut c = self.color;
        for k in 0..3 {
            c[k] += self.final_transmittance * background[k];
        }
        c
    }

    /// Distance at the start of segment `i`.
    pub fn segment_start(&self, t_near: f64, i: usize) -> f64 {
        t_near + i as f64 * self.step
    }
}

fn check_interval(t_near: f64, t_far: f64, n_steps: usize) -> Result<()> {
    if !(t_near > 0.0 && t_near < t_far && t_far.is_finite()) {
        return Err(domain(format!("march interval must satisfy 0 < t_near < t_far, got [{t_near}, {t_far}]")));
    }
    if n_steps == 0 {
        return Err(domain("march needs at least one step"));
    }
    Ok(())
}

#[inline]
fn segment_alpha(density: f64, step: f64) -> f64 {
    -(-density * step).exp_m1()
}

/// Marches `n_steps` uniform segments over `[t_near, t_far]`, sampling at
/// segment starts.
pub fn march(field: &dyn RadianceField, ray: &Ray, t_near: f64, t_far: f64, n_steps: usize) -> Result<MarchResult> {
    march_with(field, ray, t_near, t_far, n_steps, SamplePlacement::Start)
}

pub fn march_with(
    field: &dyn RadianceField,
    ray: &Ray,
    t_near: f64,
    t_far: f64,
    n_steps: usize,
    placement: SamplePlacement,
) -> Result<MarchResult> {
    check_interval(t_near, t_far, n_steps)?;
    let step = (t_far - t_near) / n_steps as f64;
    let offset = match placement {
        SamplePlacement::Start => 0.0,
        SamplePlacement::Midpoint => 0.5,
    };
    let mut out = MarchResult {
        t: Vec::with_capacity(n_steps),
        step,
        density: Vec::with_capacity(n_steps),
        rgb: Vec::with_capacity(n_steps),
        alpha: Vec::with_capacity(n_steps),
        transmittance: Vec::with_capacity(n_steps),
        final_transmittance: 1.0,
        color: [0.0; 3],
    };
    let mut trans = 1.0;
    for i in 0..n_steps {
        let t = t_near + (i as f64 + offset) * step;
        let s = field.sample(&ray.at(t), &ray.direction);
        let a = segment_alpha(s.density, step);
        for k in 0..3 {
            out.color[k] += trans * a * s.rgb[k];
        }
        out.t.push(t);
        out.density.push(s.density);
        out.rgb.push(s.rgb);
        out.alpha.push(a);
        out.transmittance.push(trans);
        trans *= 1.0 - a;
    }
    out.final_transmittance = trans;
    Ok(out)
}

/// Start of the first segment after which transmittance is at most 0.5.
///
/// Returns `None` if the ray never becomes half occluded.
pub fn median_depth(field: &dyn RadianceField, ray: &Ray, t_near: f64, t_far: f64, n_steps: usize) -> Result<Option<f64>> {
    check_interval(t_near, t_far, n_steps)?;
    let step = (t_far - t_near) / n_steps as f64;
    let mut trans = 1.0;
    for i in 0..n_steps {
        let t = t_near + i as f64 * step;
        let s = field.sample(&ray.at(t), &ray.direction);
        trans *= 1.0 - segment_alpha(s.density, step);
        if trans <= 0.5 {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

/// Interval of the ray inside the field bounds, starting no closer than
/// [`MIN_T_NEAR`].
pub fn bounds_interval(field: &dyn RadianceField, ray: &Ray) -> Option<(f64, f64)> {
    let (t0, t1) = field.bounds().intersect(ray)?;
    let t0 = t0.max(MIN_T_NEAR);
    (t0 < t1).then_some((t0, t1))
}

/// [`median_depth`] over the part of the ray inside the field bounds.
pub fn median_depth_in_bounds(field: &dyn RadianceField, ray: &Ray, n_steps: usize) -> Result<Option<f64>> {
    match bounds_interval(field, ray) {
        Some((t0, t1)) => median_depth(field, ray, t0, t1, n_steps),
        None => Ok(None),
    }
}

/// Color of one ray marched over the field bounds, composited over `background`.
pub fn march_color(field: &dyn RadianceField, ray: &Ray, n_steps: usize, background: [f64; 3]) -> Result<[f64; 3]> {
    match bounds_interval(field, ray) {
        Some((t0, t1)) => Ok(march(field, ray, t0, t1, n_steps)?.color_over(background)),
        None => Ok(background),
    }
}

/// Marches the center ray of every pixel.
pub fn render_field(field: &dyn RadianceField, camera: &Camera, n_steps: usize, background: [f64; 3]) -> Result<ImageBuffer> {
    if n_steps == 0 {
        return Err(domain("render_field needs at least one step"));
    }
    let (w, h) = (camera.width, camera.height);
    let mut img = ImageBuffer::new(w, h);
    par::for_each_chunk_mut(&mut img.data, w * 3, |v, row| {
        for u in 0..w {
            let ray = camera.ray_at(u as f64 + 0.5, v as f64 + 0.5);
            let c = march_color(field, &ray, n_steps, background).expect("interval checked");
            row[u * 3..u * 3 + 3].copy_from_slice(&c);
        }
    });
    Ok(img)
}

// ---------------------------------------------------------------------------
// Grid training

#[derive(Clone, Debug, PartialEq)]
pub struct GridTrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_rays: usize,
    pub n_steps: usize,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for GridTrainConfig {
    fn default() -> Self {
        GridTrainConfig {
            iterations: 20_000,
            learning_rate: 1e-2,
            batch_rays: 4096,
            n_steps: 512,
            background: [0.0; 3],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridTrainReport {
    /// Batch MSE at every iteration.
    pub losses: Vec<f64>,
    /// Loss of the last iteration, `None` when no iteration ran.
    pub final_loss: Option<f64>,
}

const GRAD_CHUNKS: usize = 4;

/// Fits the grid to posed images by Adam on the per-ray squared color error.
pub fn train_grid(
    field: &mut DenseGridField,
    images: &[ImageBuffer],
    cameras: &[Camera],
    config: &GridTrainConfig,
) -> Result<GridTrainReport> {
    if images.is_empty() || images.len() != cameras.len() {
        return Err(domain("train_grid needs at least one image with a matching camera"));
    }
    for (img, cam) in images.iter().zip(cameras) {
        if img.width != cam.width || img.height != cam.height {
            return Err(domain("image and camera sizes differ"));
        }
    }
    if config.batch_rays == 0 || config.n_steps == 0 {
        return Err(domain("batch_rays and n_steps must be positive"));
    }
    let mut report = GridTrainReport { losses: Vec::with_capacity(config.iterations), final_loss: None };
    if config.iterations == 0 {
        return Ok(report);
    }

    let n = field.num_params();
    let offsets = field.offsets();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut buffers: Vec<(Vec<f64>, f64)> = vec![(vec![0.0; n], 0.0); GRAD_CHUNKS];

    for it in 0..config.iterations {
        let batch: Vec<(usize, usize, usize)> = (0..config.batch_rays)
            .map(|_| {
                let view = rng.gen_range(0..images.len());
                let cam = &cameras[view];
                (view, rng.gen_range(0..cam.width), rng.gen_range(0..cam.height))
            })
            .collect();
        let chunk = config.batch_rays.div_ceil(GRAD_CHUNKS);
        let scale = 1.0 / (3 * config.batch_rays) as f64;
        let field_ref = &*field;
        par::for_each_chunk_mut(&mut buffers, 1, |ci, slot| {
            let (g, acc) = &mut slot[0];
            g.iter_mut().for_each(|x| *x = 0.0);
            *acc = 0.0;
            let lo = (ci * chunk).min(batch.len());
            let hi = ((ci + 1) * chunk).min(batch.len());
            for &(view, u, vv) in &batch[lo..hi] {
                let ray = cameras[view].ray_at(u as f64 + 0.5, vv as f64 + 0.5);
                let target = images[view].pixel(u, vv);
                *acc += ray_loss_grad(field_ref, &offsets, &ray, target, config, scale, g);
            }
        });
        let loss = buffers.iter().map(|b| b.1).sum::<f64>() * scale;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it as u64 });
        }
        report.losses.push(loss);

        let t = (it + 1) as i32;
        let bc1 = 1.0 - f64::powi(b1, t);
        let bc2 = 1.0 - f64::powi(b2, t);
        let lr = config.learning_rate;
        let mut idx = 0;
        for level in field.levels.iter_mut() {
            for p in level.values.iter_mut() {
                let g: f64 = buffers.iter().map(|b| b.0[idx]).sum();
                m[idx] = b1 * m[idx] + (1.0 - b1) * g;
                v[idx] = b2 * v[idx] + (1.0 - b2) * g * g;
                *p -= lr * (m[idx] / bc1) / ((v[idx] / bc2).sqrt() + eps);
                idx += 1;
            }
        }
        if field.levels.iter().any(|l| l.values.iter().any(|x| !x.is_finite())) {
            return Err(Error::Diverged { iteration: it as u64 });
        }
    }
    report.final_loss = report.losses.last().copied();
    Ok(report)
}

/// Adds the gradient of `scale·|C − target|²` for one ray into `grad` and
/// returns the unscaled squared error.
fn ray_loss_grad(
    field: &DenseGridField,
    offsets: &[usize],
    ray: &Ray,
    target: [f64; 3],
    config: &GridTrainConfig,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let bg = config.background;
    let Some((t0, t1)) = field.bounds.intersect(ray).map(|(a, b)| (a.max(MIN_T_NEAR), b)).filter(|(a, b)| a < b)
    else {
        return (0..3).map(|k| (bg[k] - target[k]).powi(2)).sum();
    };
    let n = config.n_steps;
    let step = (t1 - t0) / n as f64;
    let mut samples = Vec::with_capacity(n);
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    for i in 0..n {
        let p = ray.at(t0 + i as f64 * step);
        let Some(raw) = field.raw(&p) else { continue };
        let s = DenseGridField::activate(raw);
        let a = segment_alpha(s.density, step);
        for k in 0..3 {
            color[k] += trans * a * s.rgb[k];
        }
        samples.push((p, s, a, trans));
        trans *= 1.0 - a;
    }
    let mut err = 0.0;
    let mut d_color = [0.0; 3];
    for k in 0..3 {
        color[k] += trans * bg[k];
        let diff = color[k] - target[k];
        err += diff * diff;
        d_color[k] = 2.0 * diff * scale;
    }

    let mut behind = bg;
    for (p, s, a, tr) in samples.iter().rev() {
        let d_alpha: f64 = (0..3).map(|k| d_color[k] * tr * (s.rgb[k] - behind[k])).sum();
        let mut d_raw = [0.0; GRID_CHANNELS];
        d_raw[0] = d_alpha * (1.0 - a) * s.density * step;
        for k in 0..3 {
            d_raw[k + 1] = d_color[k] * tr * a * s.rgb[k] * (1.0 - s.rgb[k]);
            behind[k] = a * s.rgb[k] + (1.0 - a) * behind[k];
        }
        for (level, &off) in field.levels.iter().zip(offsets) {
            let c = field.corners(level, p);
            for (&idx, &w) in c.index.iter().zip(&c.weight) {
                let base = off + idx * GRID_CHANNELS;
                for ch in 0..GRID_CHANNELS {
                    grad[base + ch] += w * d_raw[ch];
                }
            }
        }
    }
    err
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn unit_box(half: f64) -> Aabb {
        Aabb::new(Vec3::repeat(-half), Vec3::repeat(half)).unwrap()
    }

    fn constant_field(density: f64, rgb: [f64; 3], half: f64) -> AnalyticField {
        let b = unit_box(half);
        AnalyticField::new(
            vec![FieldShape::new(Shape::Box { min: b.min, max: b.max }, density, ColorPattern::Constant(rgb))],
            b,
        )
        .unwrap()
    }

    fn z_ray() -> Ray {
        Ray::new(Vec3::zeros(), Vec3::z()).unwrap()
    }

    #[test]
    fn empty_field_is_transparent() {
        let f = AnalyticField::empty(unit_box(20.0));
        let r = march(&f, &z_ray(), 0.1, 10.0, 64).unwrap();
        assert_eq!(r.color, [0.0; 3]);
        assert_eq!(r.final_transmittance, 1.0);
        assert!(r.transmittance.iter().all(|&t| t == 1.0));
        assert_eq!(median_depth(&f, &z_ray(), 0.1, 10.0, 64).unwrap(), None);
    }

    #[test]
    fn ln2_segment_has_half_alpha() {
        let f = constant_field(std::f64::consts::LN_2, [1.0; 3], 20.0);
        let r = march(&f, &z_ray(), 1.0, 2.0, 1).unwrap();
        assert!((r.alpha[0] - 0.5).abs() < 1e-15);
        assert!((r.final_transmittance - 0.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_intervals_are_rejected() {
        let f = AnalyticField::empty(unit_box(1.0));
        assert!(march(&f, &z_ray(), 0.0, 1.0, 4).is_err());
        assert!(march(&f, &z_ray(), 2.0, 1.0, 4).is_err());
        assert!(march(&f, &z_ray(), 0.1, 1.0, 0).is_err());
        assert!(median_depth(&f, &z_ray(), -1.0, 1.0, 4).is_err());
    }

    #[test]
    fn opaque_red_sphere() {
        let sphere = FieldShape::new(
            Shape::Sphere { center: Vec3::new(0.0, 0.0, 5.0), radius: 1.0 },
            1e4,
            ColorPattern::Constant([1.0, 0.0, 0.0]),
        );
        let f = AnalyticField::with_auto_bounds(vec![sphere]).unwrap();
        let r = march(&f, &z_ray(), 0.1, 10.0, 1024).unwrap();
        assert!(r.final_transmittance < 1e-6);
        let expect = 1.0 - r.final_transmittance;
        assert!((r.color[0] - expect).abs() < 1e-3);
        assert!(r.color[1].abs() < 1e-12 && r.color[2].abs() < 1e-12);
    }

    fn slab_field(z0: f64, density: f64) -> AnalyticField {
        let slab = FieldShape::new(
            Shape::Slab { normal: Vec3::z(), lo: z0, hi: 100.0 },
            density,
            ColorPattern::Constant([1.0; 3]),
        );
        AnalyticField::new(vec![slab], unit_box(200.0)).unwrap()
    }

    #[test]
    fn slab_median_depth_within_one_step() {
        let f = slab_field(5.0, 1e4);
        let (near, far, n) = (0.1, 10.0, 1024);
        let step = (far - near) / n as f64;
        let t = median_depth(&f, &z_ray(), near, far, n).unwrap().unwrap();
        assert!((t - 5.0).abs() <= step, "t_med {t}");
        // the first occupied sample is at or past the surface
        assert!(t >= 5.0);
    }

    #[test]
    fn median_depth_stable_under_refinement() {
        let f = slab_field(5.0, 1e4);
        let coarse_step = 9.9 / 64.0;
        let base = median_depth(&f, &z_ray(), 0.1, 10.0, 64).unwrap().unwrap();
        for n in [128, 256, 1024, 4096] {
            let t = median_depth(&f, &z_ray(), 0.1, 10.0, n).unwrap().unwrap();
            assert!((t - base).abs() <= coarse_step, "n={n}: {t} vs {base}");
        }
    }

    #[test]
    fn partial_medium_never_crosses_half() {
        // total optical depth -ln 0.6 over the whole interval
        let (near, far) = (0.1, 10.0);
        let sigma = -(0.6f64).ln() / (far - near);
        let f = constant_field(sigma, [1.0; 3], 50.0);
        assert_eq!(median_depth(&f, &z_ray(), near, far, 1000).unwrap(), None);
        let r = march(&f, &z_ray(), near, far, 1000).unwrap();
        assert!((r.final_transmittance - 0.6).abs() < 1e-12);
    }

    #[test]
    fn median_depth_matches_march_rule() {
        let f = slab_field(3.3, 2.0);
        let r = march(&f, &z_ray(), 0.5, 9.0, 200).unwrap();
        let k = (0..200).find(|&i| r.transmittance[i] * (1.0 - r.alpha[i]) <= 0.5).unwrap();
        assert!(r.transmittance[k] > 0.5);
        assert_eq!(median_depth(&f, &z_ray(), 0.5, 9.0, 200).unwrap(), Some(r.t[k]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn transmittance_is_product_of_alphas(
            seed in 0u64..1000, n in 1usize..200, soft in 0.0f64..0.5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shapes = (0..3).map(|_| {
                let c = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(3.0..7.0));
                FieldShape::new(Shape::Sphere { center: c, radius: rng.gen_range(0.3..1.5) },
                    rng.gen_range(0.0..20.0), ColorPattern::Constant([0.3, 0.6, 0.9])).with_softness(soft)
            }).collect();
            let f = AnalyticField::with_auto_bounds(shapes).unwrap();
            let r = march(&f, &z_ray(), 0.1, 10.0, n).unwrap();
            prop_assert_eq!(r.transmittance[0], 1.0);
            let mut prod = 1.0;
            for i in 0..n {
                prop_assert!((0.0..=1.0).contains(&r.alpha[i]));
                prop_assert!((r.transmittance[i] - prod).abs() < 1e-12);
                if i > 0 {
                    prop_assert!(r.transmittance[i] <= r.transmittance[i - 1]);
                }
                prod *= 1.0 - r.alpha[i];
            }
            prop_assert!((r.final_transmittance - prod).abs() < 1e-12);
        }

        #[test]
        fn constant_density_telescopes(sigma in 0.0f64..3.0, n in 1usize..500, near in 0.1f64..2.0, len in 0.1f64..5.0) {
            let f = constant_field(sigma, [1.0; 3], 20.0);
            let r = march(&f, &z_ray(), near, near + len, n).unwrap();
            prop_assert!((r.final_transmittance - (-sigma * len).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_render_is_background() {
        let f = AnalyticField::empty(unit_box(5.0));
        let cam = Camera::identity(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap();
        let img = render_field(&f, &cam, 32, [0.0; 3]).unwrap();
        assert!(img.data.iter().all(|&x| x == 0.0));
        let img = render_field(&f, &cam, 32, [0.2, 0.4, 0.6]).unwrap();
        assert_eq!(img.pixel(3, 9), [0.2, 0.4, 0.6]);
    }

    #[test]
    fn sphere_silhouette_radius() {
        let (dist, radius, focal) = (6.0f64, 1.0f64, 80.0);
        let sphere = FieldShape::new(
            Shape::Sphere { center: Vec3::new(0.0, 0.0, dist), radius },
            1e4,
            ColorPattern::Constant([1.0; 3]),
        );
        let f = AnalyticField::with_auto_bounds(vec![sphere]).unwrap();
        let cam = Camera::identity(focal, focal, 32.0, 32.0, 64, 64).unwrap();
        let img = render_field(&f, &cam, 512, [0.0; 3]).unwrap();
        let covered = (0..64 * 64).filter(|i| img.data[i * 3] > 0.5).count();
        let measured = (covered as f64 / std::f64::consts::PI).sqrt();
        let expected = focal * radius / (dist * dist - radius * radius).sqrt();
        assert!((measured - expected).abs() < 1.0, "{measured} vs {expected}");
    }

    #[test]
    fn doubling_steps_converges_for_thin_media() {
        let shapes = vec![
            FieldShape::new(
                Shape::Sphere { center: Vec3::new(0.2, -0.1, 4.0), radius: 1.2 },
                0.8,
                ColorPattern::Constant([0.9, 0.3, 0.2]),
            )
            .with_softness(0.6),
            FieldShape::new(
                Shape::Box { min: Vec3::new(-1.5, -0.5, 4.5), max: Vec3::new(0.0, 1.0, 6.0) },
                0.5,
                ColorPattern::Constant([0.1, 0.5, 1.0]),
            )
            .with_softness(0.6),
        ];
        let f = AnalyticField::with_auto_bounds(shapes).unwrap();
        let cam = Camera::identity(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap();
        let a = render_field(&f, &cam, 512, [0.0; 3]).unwrap();
        let b = render_field(&f, &cam, 1024, [0.0; 3]).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-3, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn box_intersection() {
        let b = unit_box(1.0);
        let r = Ray::new(Vec3::new(0.0, 0.0, -5.0), Vec3::z()).unwrap();
        let (t0, t1) = b.intersect(&r).unwrap();
        assert!((t0 - 4.0).abs() < 1e-12 && (t1 - 6.0).abs() < 1e-12);
        let miss = Ray::new(Vec3::new(3.0, 0.0, -5.0), Vec3::z()).unwrap();
        assert!(b.intersect(&miss).is_none());
        let inside = Ray::new(Vec3::zeros(), Vec3::x()).unwrap();
        assert_eq!(bounds_interval(&AnalyticField::empty(b), &inside), Some((MIN_T_NEAR, 1.0)));
    }

    #[test]
    fn frustum_bounds_cover_corners() {
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -4.0), Vec3::zeros(), -Vec3::y(), 30.0, 30.0, 20, 20).unwrap();
        let b = Aabb::from_frustums(&[cam.clone()], 1.0, 8.0).unwrap();
        for (x, y) in [(0.0, 0.0), (20.0, 20.0), (10.0, 3.0)] {
            let r = cam.ray_at(x, y);
            assert!(b.contains(&r.at(1.0)) && b.contains(&r.at(7.9)));
        }
    }

    #[test]
    fn grid_validation() {
        let b = unit_box(1.0);
        assert!(DenseGridField::new(b, &[]).is_err());
        assert!(DenseGridField::new(b, &[8, 8]).is_err());
        assert!(DenseGridField::new(b, &[8, 4]).is_err());
        assert!(DenseGridField::new(b, &[1]).is_err());
        let g = DenseGridField::new(b, &[4, 8]).unwrap();
        assert_eq!(g.num_params(), (64 + 512) * 4);
        let s = g.sample(&Vec3::new(0.1, 0.2, 0.3), &Vec3::zeros());
        assert!((s.density - 0.01).abs() < 1e-12);
        assert_eq!(s.rgb, [0.5; 3]);
        assert_eq!(g.sample(&Vec3::new(2.0, 0.0, 0.0), &Vec3::zeros()), FieldSample::EMPTY);
    }

    fn random_grid(seed: u64, res: &[usize]) -> DenseGridField {
        let mut g = DenseGridField::new(unit_box(1.0), res).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut g.levels {
            for v in &mut l.values {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        g
    }

    #[test]
    fn trilinear_is_continuous_across_cells() {
        let g = random_grid(3, &[5, 9]);
        // vertex planes of the coarse level sit at multiples of 0.5
        for x in [-0.5, 0.0, 0.5] {
            let p = Vec3::new(x, 0.13, -0.27);
            let eps = Vec3::new(1e-9, 0.0, 0.0);
            let a = g.raw(&(p - eps)).unwrap();
            let b = g.raw(&(p + eps)).unwrap();
            for ch in 0..4 {
                assert!((a[ch] - b[ch]).abs() < 1e-7);
            }
        }
        // exact at a vertex
        let r = g.raw(&Vec3::new(-1.0, -1.0, -1.0)).unwrap();
        assert!((r[0] - (g.levels[0].values[0] + g.levels[1].values[0])).abs() < 1e-15);
    }

    #[test]
    fn grid_checkpoint_round_trip() {
        let g = random_grid(4, &[3, 6]);
        let mut bytes = Vec::new();
        g.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 8 + 4 + 8 + 48 + (27 + 216) * 16);
        let back = DenseGridField::read_from(&bytes[..]).unwrap();
        assert_eq!(back.bounds, g.bounds);
        for (a, b) in back.levels.iter().zip(&g.levels) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
        assert!(DenseGridField::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(DenseGridField::read_from(&bad[..]).is_err());
    }

    fn tiny_dataset(field: &dyn RadianceField, n_steps: usize) -> (Vec<ImageBuffer>, Vec<Camera>) {
        let cams: Vec<Camera> = (0..3)
            .map(|i| {
                let a = i as f64 * 2.0;
                let eye = Vec3::new(3.0 * a.cos(), 0.5, 3.0 * a.sin());
                Camera::look_at(eye, Vec3::zeros(), -Vec3::y(), 10.0, 10.0, 8, 8).unwrap()
            })
            .collect();
        let imgs = cams.iter().map(|c| render_field(field, c, n_steps, [0.0; 3]).unwrap()).collect();
        (imgs, cams)
    }

    #[test]
    fn zero_iterations_leave_grid_unchanged() {
        let mut g = random_grid(5, &[4]);
        let before = g.clone();
        let (imgs, cams) = tiny_dataset(&g, 16);
        let cfg = GridTrainConfig { iterations: 0, ..GridTrainConfig::default() };
        let rep = train_grid(&mut g, &imgs, &cams, &cfg).unwrap();
        assert_eq!(g, before);
        assert_eq!(rep.final_loss, None);
        assert!(train_grid(&mut g, &[], &[], &cfg).is_err());
    }

    #[test]
    fn ray_gradient_matches_finite_differences() {
        let g = random_grid(6, &[3, 5]);
        let offsets = g.offsets();
        let cfg = GridTrainConfig { n_steps: 24, background: [0.1, 0.2, 0.3], ..GridTrainConfig::default() };
        let ray = Ray::new(Vec3::new(-2.0, 0.3, -2.5), Vec3::new(1.0, -0.1, 1.1)).unwrap();
        let target = [0.7, 0.1, 0.4];
        let mut grad = vec![0.0; g.num_params()];
        ray_loss_grad(&g, &offsets, &ray, target, &cfg, 1.0, &mut grad);
        let loss = |g: &DenseGridField| {
            let mut scratch = vec![0.0; g.num_params()];
            ray_loss_grad(g, &offsets, &ray, target, &cfg, 1.0, &mut scratch)
        };
        let mut checked = 0;
        let h = 1e-6;
        for idx in (0..g.num_params()).filter(|&i| grad[i].abs() > 1e-8) {
            let (li, vi) = if idx < offsets[1] { (0, idx) } else { (1, idx - offsets[1]) };
            let mut p = g.clone();
            p.levels[li].values[vi] += h;
            let mut m = g.clone();
            m.levels[li].values[vi] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let rel = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {idx}: fd {fd} vs {}", grad[idx]);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn self_distillation_loss_decreases() {
        let target = random_grid(7, &[4]);
        let (imgs, cams) = tiny_dataset(&target, 32);
        let mut g = DenseGridField::new(target.bounds, &[4]).unwrap();
        let cfg = GridTrainConfig { iterations: 200, batch_rays: 64, n_steps: 32, seed: 1, ..GridTrainConfig::default() };
        let rep = train_grid(&mut g, &imgs, &cams, &cfg).unwrap();
        let window = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let smoothed: Vec<f64> = rep.losses.chunks(40).map(window).collect();
        for w in smoothed.windows(2) {
            assert!(w[1] < w[0], "{smoothed:?}");
        }
    }
}
