//! Forward compositing against a brute-force per-pixel oracle.

mod common;

use common::*;
use conesplat_core::camera::Camera;
use conesplat_core::gaussian::GaussianScene;
use conesplat_core::image::ImageBuffer;
use conesplat_core::raster::{kernel_response, project, render, RenderOptions};
use conesplat_core::sh::eval_sh;
use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::Rng;

/// (alpha, color) of every projected primitive at a pixel, nearest first.
fn layers(scene: &GaussianScene, camera: &Camera, opts: &RenderOptions, x: usize, y: usize) -> Vec<(f64, [f64; 3])> {
    let center = camera.center();
    let mut hits: Vec<(f64, f64, [f64; 3])> = Vec::new();
    for p in &scene.primitives {
        let Some(proj) = project(p, camera, opts) else { continue };
        let k = kernel_response(Vector2::new(x as f64 + 0.5, y as f64 + 0.5), &proj).unwrap();
        let alpha = (p.opacity() * k).min(opts.max_alpha);
        let d = (p.position - center).normalize();
        let rgb = eval_sh(&p.sh, [d.x, d.y, d.z], scene.sh_order).unwrap();
        hits.push((proj.depth, alpha, rgb));
    }
    hits.sort_by(|a, b| a.0.total_cmp(&b.0));
    hits.into_iter().map(|(_, a, c)| (a, c)).collect()
}

fn oracle_front_to_back(scene: &GaussianScene, camera: &Camera, opts: &RenderOptions) -> ImageBuffer {
    let mut img = ImageBuffer::new(camera.width, camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for (a, rgb) in layers(scene, camera, opts, x, y) {
                for k in 0..3 {
                    c[k] += rgb[k] * a * t;
                }
                t *= 1.0 - a;
            }
            for k in 0..3 {
                c[k] += t * opts.background[k];
            }
            img.set_pixel(x, y, c);
        }
    }
    img
}

fn oracle_back_to_front(scene: &GaussianScene, camera: &Camera, opts: &RenderOptions) -> ImageBuffer {
    let mut img = ImageBuffer::new(camera.width, camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let mut c = opts.background;
            for (a, rgb) in layers(scene, camera, opts, x, y).into_iter().rev() {
                for k in 0..3 {
                    c[k] = a * rgb[k] + (1.0 - a) * c[k];
                }
            }
            img.set_pixel(x, y, c);
        }
    }
    img
}

fn oracle_options() -> RenderOptions {
    RenderOptions {
        low_pass: true,
        cull_sigmas: f64::INFINITY,
        transmittance_floor: 0.0,
        background: [0.05, 0.1, 0.2],
        ..RenderOptions::default()
    }
}

#[test]
fn matches_brute_force_oracle() {
    let camera = axis_camera(16, 16, 14.0);
    let opts = oracle_options();
    for seed in 0..5u64 {
        let mut r = rng(100 + seed);
        let scene = random_scene(&mut r, 50, conesplat_core::sh::ShOrder::new(1).unwrap(), 16, 14.0);
        let out = render(&scene, &camera, &opts).unwrap().color;
        let oracle = oracle_front_to_back(&scene, &camera, &opts);
        assert!(out.max_abs_diff(&oracle) < 1e-6, "seed {seed}: {}", out.max_abs_diff(&oracle));
    }
}

#[test]
fn front_to_back_equals_back_to_front() {
    let camera = axis_camera(12, 10, 12.0);
    let opts = oracle_options();
    for seed in 0..5u64 {
        let mut r = rng(200 + seed);
        let scene = random_scene(&mut r, 30, conesplat_core::sh::ShOrder::new(2).unwrap(), 12, 12.0);
        let a = oracle_front_to_back(&scene, &camera, &opts);
        let b = oracle_back_to_front(&scene, &camera, &opts);
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!(render(&scene, &camera, &opts).unwrap().color.max_abs_diff(&b) < 1e-6);
    }
}

#[test]
fn storage_order_does_not_matter() {
    let camera = axis_camera(16, 16, 14.0);
    for opts in [RenderOptions::default(), oracle_options()] {
        let mut r = rng(300);
        let scene = random_scene(&mut r, 60, conesplat_core::sh::ShOrder::new(1).unwrap(), 16, 14.0);
        let base = render(&scene, &camera, &opts).unwrap().color;
        for _ in 0..5 {
            let mut shuffled = scene.clone();
            shuffled.primitives.shuffle(&mut r);
            let out = render(&shuffled, &camera, &opts).unwrap().color;
            assert!(base.max_abs_diff(&out) < 1e-6);
        }
    }
}

/// Blend weight `alpha_i * T_i` of primitive `i` at every pixel, read off the
/// renderer by toggling that primitive's color between black and white.
fn blend_weight(scene: &GaussianScene, camera: &Camera, opts: &RenderOptions, i: usize) -> ImageBuffer {
    let with = |rgb: [f64; 3]| {
        let mut s = scene.clone();
        s.primitives[i].sh[..3].copy_from_slice(&conesplat_core::sh::rgb_to_dc(rgb));
        render(&s, camera, opts).unwrap().color
    };
    let (white, black) = (with([1.0; 3]), with([0.0; 3]));
    let data = white.data.iter().zip(&black.data).map(|(a, b)| a - b).collect();
    ImageBuffer::from_data(camera.width, camera.height, data).unwrap()
}

#[test]
fn raising_opacity_never_lowers_own_contribution() {
    let camera = axis_camera(10, 10, 10.0);
    let mut r = rng(400);
    for opts in [RenderOptions::exact(), RenderOptions::default()] {
        for _ in 0..10 {
            let scene = random_scene(&mut r, 8, conesplat_core::sh::ShOrder::new(0).unwrap(), 10, 10.0);
            let i = r.gen_range(0..scene.len());
            let before = blend_weight(&scene, &camera, &opts, i);
            let mut raised = scene.clone();
            raised.primitives[i].opacity_logit += r.gen_range(0.01..2.0);
            let after = blend_weight(&raised, &camera, &opts, i);
            for (b, a) in before.data.iter().zip(&after.data) {
                assert!(a >= &(b - 1e-12), "{a} < {b}");
            }
        }
    }
}
