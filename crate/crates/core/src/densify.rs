//! Error-guided densification.
//!
//! Pixels are drawn from the per-pixel error of the current render, and a
//! primitive sized to the pixel's cone footprint is spawned at each pixel's
//! median depth. Spawned primitives wait in the scene's accumulation buffer
//! until the next [`merge`], which prunes transparent primitives first and
//! then appends the buffer under the optional budget.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::error::{domain, Result};
use crate::field::RadianceField;
use crate::gaussian::{sigmoid, GaussianScene, GaussianPrimitive};
use crate::image::ImageBuffer;
use crate::init::{hit_points, seed_primitive, PixelSample};
use crate::sh::ShOrder;

#[derive(Clone, Debug, PartialEq)]
pub struct DensifyConfig {
    /// Hard cap on the number of primitives.
    pub budget: Option<usize>,
    /// Growth rate used when there is no budget.
    pub beta: f64,
    /// Multiplier from cone radius to primitive scale.
    pub lambda_scale: f64,
    pub prune_threshold: f64,
    /// Iterations between merges.
    pub interval: u64,
    /// No spawning at or after this iteration.
    pub densify_until: u64,
    /// March steps for median depths.
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            budget: None,
            beta: 0.02,
            lambda_scale: 2.0,
            prune_threshold: 0.005,
            interval: 100,
            densify_until: 25_000,
            n_steps: 512,
            seed: 0,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(domain(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.prune_threshold > 0.0 && self.prune_threshold < 1.0) {
            return Err(domain(format!("prune threshold must be in (0, 1), got {}", self.prune_threshold)));
        }
        if self.interval == 0 {
            return Err(domain("densification interval must be >= 1"));
        }
        if !(self.lambda_scale.is_finite() && self.lambda_scale > 0.0) {
            return Err(domain("lambda_scale must be positive"));
        }
        if self.n_steps == 0 {
            return Err(domain("n_steps must be >= 1"));
        }
        Ok(())
    }

    /// Number of pixels to sample at one densification step.
    pub fn n_sample(&self, n_gs: usize, n_last: usize) -> usize {
        match self.budget {
            Some(_) => n_sample_budget(n_gs, n_last),
            None => n_sample_growth(n_gs, self.beta),
        }
    }
}

/// Per-pixel error, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ErrorMap {
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Mean absolute channel difference at each pixel.
pub fn error_map(render: &ImageBuffer, gt: &ImageBuffer) -> Result<ErrorMap> {
    render.check_dims(gt)?;
    let values = render
        .data
        .chunks_exact(3)
        .zip(gt.data.chunks_exact(3))
        .map(|(a, b)| ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0)
        .collect();
    Ok(ErrorMap { width: render.width, height: render.height, values })
}

/// Draws up to `n` distinct pixels, each successive draw proportional to the
/// error among the pixels not yet chosen.
///
/// Uses exponential keys (`ln(u) / w`, keep the largest), which yields the
/// same distribution as successive normalized draws. An all-zero map yields
/// an empty list; `n` larger than the number of positive pixels returns all
/// of them.
pub fn sample_error_pixels(map: &ErrorMap, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_error_pixels_with(map, n, &mut rng)
}

pub fn sample_error_pixels_with<R: Rng>(map: &ErrorMap, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if n == 0 {
        return Vec::new();
    }
    let mut keyed: Vec<(f64, usize)> = Vec::new();
    for (i, &w) in map.values.iter().enumerate() {
        if w > 0.0 && w.is_finite() {
            // 1 - u lies in (0, 1], so the log is finite
            let u: f64 = 1.0 - rng.gen::<f64>();
            keyed.push((u.ln() / w, i));
        }
    }
    let n = n.min(keyed.len());
    if n == 0 {
        return Vec::new();
    }
    let by_key_desc = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if n < keyed.len() {
        keyed.select_nth_unstable_by(n - 1, by_key_desc);
        keyed.truncate(n);
    }
    keyed.sort_by(by_key_desc);
    keyed.into_iter().map(|(_, i)| (i % map.width, i / map.width)).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpawnResult {
    pub primitives: Vec<GaussianPrimitive>,
    /// Pixels whose ray never reached a median depth.
    pub skipped: usize,
}

/// One primitive per pixel at its median depth, with scale
/// `lambda_scale · cone_radius`.
pub fn spawn_gaussians(
    pixels: &[(usize, usize)],
    camera: &Camera,
    field: &dyn RadianceField,
    config: &DensifyConfig,
    order: ShOrder,
) -> Result<SpawnResult> {
    let samples: Vec<PixelSample> = pixels.iter().map(|&(u, v)| PixelSample { image: 0, u, v }).collect();
    let hits = hit_points(field, std::slice::from_ref(camera), &samples, config.n_steps)?;
    let mut out = SpawnResult::default();
    for (&(u, v), hit) in pixels.iter().zip(hits) {
        match hit {
            Some((pos, t)) => {
                let scale = config.lambda_scale * camera.cone_radius(u as f64, v as f64, t)?;
                out.primitives.push(seed_primitive(field, pos, scale, order));
            }
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

/// `round(max(0.2·n_gs, 1.2·n_last) / 100)`, rounding halves up.
pub fn n_sample_budget(n_gs: usize, n_last: usize) -> usize {
    let scaled = (2 * n_gs as u128).max(12 * n_last as u128);
    ((scaled + 500) / 1000) as usize
}

/// `round(beta · n_gs / 100)`.
pub fn n_sample_growth(n_gs: usize, beta: f64) -> usize {
    (beta * n_gs as f64 / 100.0).round().max(0.0) as usize
}

/// Which primitives survive pruning.
pub fn prune_mask(scene: &GaussianScene, threshold: f64) -> Vec<bool> {
    scene.primitives.iter().map(|p| sigmoid(p.opacity_logit) >= threshold).collect()
}

fn retain_by_mask<T>(items: &mut Vec<T>, keep: &[bool]) {
    let mut i = 0;
    items.retain(|_| {
        let k = keep[i];
        i += 1;
        k
    });
}

/// Removes primitives with opacity strictly below `threshold`, keeping order.
pub fn prune(scene: &mut GaussianScene, threshold: f64) -> usize {
    let keep = prune_mask(scene, threshold);
    let before = scene.len();
    retain_by_mask(&mut scene.primitives, &keep);
    before - scene.len()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MergeStats {
    pub iteration: u64,
    pub pruned: usize,
    pub accumulated: usize,
    pub inserted: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeOutcome {
    pub stats: MergeStats,
    /// Survival of each pre-merge primitive; inserted ones follow the survivors.
    pub kept: Vec<bool>,
}

/// Prunes, then appends the accumulation buffer. When a budget would be
/// exceeded a uniform random subset of the buffer is dropped.
pub fn merge<R: Rng>(scene: &mut GaussianScene, config: &DensifyConfig, rng: &mut R) -> MergeOutcome {
    let kept = prune_mask(scene, config.prune_threshold);
    let before = scene.len();
    retain_by_mask(&mut scene.primitives, &kept);
    let pruned = before - scene.len();

    let mut incoming = std::mem::take(&mut scene.accumulation);
    let accumulated = incoming.len();
    if let Some(budget) = config.budget {
        let room = budget.saturating_sub(scene.len());
        if incoming.len() > room {
            let mut idx: Vec<usize> = (0..incoming.len()).collect();
            idx.shuffle(rng);
            let mut chosen = vec![false; incoming.len()];
            for &i in &idx[..room] {
                chosen[i] = true;
            }
            retain_by_mask(&mut incoming, &chosen);
        }
    }
    let inserted = incoming.len();
    scene.primitives.extend(incoming);
    scene.last_inserted = inserted;
    MergeOutcome {
        stats: MergeStats { iteration: scene.iteration, pruned, accumulated, inserted, total: scene.len() },
        kept,
    }
}

pub const MERGE_CSV_HEADER: &str = "iteration,pruned,accumulated,inserted,total";

pub fn write_merge_csv<W: Write>(mut w: W, stats: &[MergeStats]) -> std::io::Result<()> {
    writeln!(w, "{MERGE_CSV_HEADER}")?;
    for s in stats {
        writeln!(w, "{},{},{},{},{}", s.iteration, s.pruned, s.accumulated, s.inserted, s.total)?;
    }
    Ok(())
}
