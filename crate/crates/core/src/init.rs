//! Scene initialization from a radiance field.
//!
//! Random training pixels are marched through the field; each pixel whose
//! ray reaches a median depth becomes one isotropic primitive at that depth,
//! colored by the field and sized by its nearest neighbors.

use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{Camera, Vec3};
use crate::dataset::Dataset;
use crate::error::{domain, Error, Result};
use crate::field::{median_depth_in_bounds, RadianceField};
use crate::gaussian::{logit, GaussianPrimitive, GaussianScene};
use crate::par;
use crate::sh::{rgb_to_dc, ShOrder};

pub const INIT_OPACITY: f64 = 0.1;
pub const SCALE_FLOOR: f64 = 1e-6;

/// One training pixel; `image` indexes the dataset's views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PixelSample {
    pub image: usize,
    pub u: usize,
    pub v: usize,
}

/// Draws pixels uniformly over every (view, pixel) pair of a view set.
pub struct PixelSampler {
    views: Vec<usize>,
    /// Cumulative pixel counts, one past each view.
    cumulative: Vec<usize>,
    widths: Vec<usize>,
    rng: ChaCha8Rng,
}

impl PixelSampler {
    pub fn new(dataset: &Dataset, seed: u64) -> Result<Self> {
        let views = dataset.train_views();
        let mut cumulative = Vec::with_capacity(views.len());
        let mut widths = Vec::with_capacity(views.len());
        let mut total = 0;
        for &i in &views {
            total += dataset.cameras[i].num_pixels();
            cumulative.push(total);
            widths.push(dataset.cameras[i].width);
        }
        if total == 0 {
            return Err(domain("no training pixels to sample"));
        }
        Ok(PixelSampler { views, cumulative, widths, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn draw(&mut self) -> PixelSample {
        let total = *self.cumulative.last().expect("non-empty");
        let k = self.rng.gen_range(0..total);
        let slot = self.cumulative.partition_point(|&c| c <= k);
        let local = k - if slot == 0 { 0 } else { self.cumulative[slot - 1] };
        let w = self.widths[slot];
        PixelSample { image: self.views[slot], u: local % w, v: local / w }
    }
}

pub fn sample_pixels_uniform(dataset: &Dataset, p_init: usize, seed: u64) -> Result<Vec<PixelSample>> {
    if p_init == 0 {
        return Err(domain("p_init must be at least 1"));
    }
    let mut sampler = PixelSampler::new(dataset, seed)?;
    Ok((0..p_init).map(|_| sampler.draw()).collect())
}

/// Mean distance from each point to its `k` nearest other points.
pub fn knn_mean_distance(points: &[Vec3], k: usize) -> Result<Vec<f64>> {
    if k == 0 || points.len() <= k {
        return Err(domain(format!("kNN with k={k} needs more than {k} points, got {}", points.len())));
    }
    let entries: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree = ImmutableKdTree::<f64, 3>::new_from_slice(&entries)
        .map_err(|e| Error::Degenerate(format!("kd-tree construction failed: {e:?}")))?;
    let want = NonZero::new(k + 1).expect("k + 1 > 0");
    Ok(par::map_range(points.len(), |i| {
        let found = tree.query(&entries[i]).nearest_n::<SquaredEuclidean<f64>>(want).execute();
        // the point itself is normally first, but duplicates can displace it
        let mut taken = 0;
        let mut sum = 0.0;
        let mut skipped_self = false;
        for r in &found {
            if !skipped_self && r.item as usize == i {
                skipped_self = true;
                continue;
            }
            if taken == k {
                break;
            }
            sum += r.distance.max(0.0).sqrt();
            taken += 1;
        }
        sum / taken as f64
    }))
}

/// Where initial primitive sizes come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScale {
    /// Mean distance to the nearest accepted positions.
    Knn { k: usize },
    /// `lambda` times the pixel cone radius at the median depth.
    Cone { lambda: f64 },
}

impl Default for InitScale {
    fn default() -> Self {
        InitScale::Knn { k: 3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    pub p_init: usize,
    pub seed: u64,
    /// March steps per ray for the median depth.
    pub n_steps: usize,
    pub scale: InitScale,
    pub sh_order: ShOrder,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { p_init: 1_000_000, seed: 0, n_steps: 512, scale: InitScale::default(), sh_order: ShOrder::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InitStats {
    pub requested: usize,
    pub accepted: usize,
    pub draws: usize,
}

/// A primitive at `position` with the initialization recipe: opacity 0.1,
/// identity rotation and the field's view-independent color in the dc band.
pub fn seed_primitive(field: &dyn RadianceField, position: Vec3, scale: f64, order: ShOrder) -> GaussianPrimitive {
    let rgb = field.sample(&position, &Vec3::zeros()).rgb;
    let mut prim = GaussianPrimitive::isotropic(position, scale.max(SCALE_FLOOR), INIT_OPACITY, [0.0; 3], order);
    prim.opacity_logit = logit(INIT_OPACITY);
    prim.sh[..3].copy_from_slice(&rgb_to_dc(rgb));
    prim
}

/// Median-depth hits for a batch of pixels, in input order.
pub(crate) fn hit_points(
    field: &dyn RadianceField,
    cameras: &[Camera],
    pixels: &[PixelSample],
    n_steps: usize,
) -> Result<Vec<Option<(Vec3, f64)>>> {
    par::map_range(pixels.len(), |i| {
        let p = pixels[i];
        let cam = &cameras[p.image];
        let ray = cam.pixel_ray(p.u as f64, p.v as f64)?;
        Ok(median_depth_in_bounds(field, &ray, n_steps)?.map(|t| (ray.at(t), t)))
    })
    .into_iter()
    .collect()
}

pub fn initialize_scene(
    field: &dyn RadianceField,
    dataset: &Dataset,
    config: &InitConfig,
) -> Result<(GaussianScene, InitStats)> {
    if config.p_init == 0 {
        return Err(domain("p_init must be at least 1"));
    }
    let mut sampler = PixelSampler::new(dataset, config.seed)?;
    let cap = config.p_init.saturating_mul(10);
    let mut draws = 0;
    let mut accepted: Vec<(PixelSample, Vec3, f64)> = Vec::with_capacity(config.p_init);
    while accepted.len() < config.p_init && draws < cap {
        let n = (config.p_init - accepted.len()).min(cap - draws);
        let batch: Vec<PixelSample> = (0..n).map(|_| sampler.draw()).collect();
        draws += n;
        for (px, hit) in batch.iter().zip(hit_points(field, &dataset.cameras, &batch, config.n_steps)?) {
            if let Some((pos, t)) = hit {
                accepted.push((*px, pos, t));
            }
        }
    }
    if accepted.is_empty() || accepted.len() * 100 < config.p_init {
        return Err(Error::Degenerate(format!(
            "only {} of {} initial rays reached a median depth after {draws} draws",
            accepted.len(),
            config.p_init
        )));
    }

    let positions: Vec<Vec3> = accepted.iter().map(|a| a.1).collect();
    let scales: Vec<f64> = match config.scale {
        InitScale::Knn { k } if positions.len() > 1 => knn_mean_distance(&positions, k.min(positions.len() - 1))?,
        // a single point has no neighbors; fall back to twice its pixel footprint
        InitScale::Knn { .. } => cone_scales(dataset, &accepted, 2.0)?,
        InitScale::Cone { lambda } => cone_scales(dataset, &accepted, lambda)?,
    };
    let primitives = positions
        .iter()
        .zip(&scales)
        .map(|(p, s)| seed_primitive(field, *p, *s, config.sh_order))
        .collect();
    let stats = InitStats { requested: config.p_init, accepted: accepted.len(), draws };
    Ok((GaussianScene::with_primitives(config.sh_order, primitives), stats))
}

fn cone_scales(dataset: &Dataset, hits: &[(PixelSample, Vec3, f64)], lambda: f64) -> Result<Vec<f64>> {
    hits.iter()
        .map(|(px, _, t)| Ok(lambda * dataset.cameras[px.image].cone_radius(px.u as f64, px.v as f64, *t)?))
        .collect()
}
