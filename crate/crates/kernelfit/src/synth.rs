//! Seeded synthetic test scenes.
//!
//! Scenes mix flat shapes, hard edges, smooth gradients and high-frequency
//! texture so that spatially adaptive filtering has something to adapt to:
//! flat regions reward strong smoothing, edges and texture punish it. All
//! content is deterministic in the seed.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{save_image_depth, BitDepth};

/// Renders a synthetic scene: sinusoidal background, a handful of filled
/// disks and rectangles, and one textured band.
pub fn synth_scene(width: usize, height: usize, channels: usize, seed: u64) -> Image {
    assert!(width > 0 && height > 0, "empty scene");
    assert!((1..=3).contains(&channels), "1 to 3 channels");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (width as f64, height as f64);
    let mut img = Image::new(width, height, channels);

    // smooth background: two oriented sinusoids over a mid-gray base
    let theta1: f64 = rng.gen_range(0.0..PI);
    let theta2: f64 = rng.gen_range(0.0..PI);
    let lambda1 = rng.gen_range(0.8..1.6) * wf.min(hf);
    let lambda2 = rng.gen_range(0.4..0.9) * wf.min(hf);
    let amp1 = rng.gen_range(0.08..0.16);
    let amp2 = rng.gen_range(0.04..0.10);
    let phase1: f64 = rng.gen_range(0.0..(2.0 * PI));
    let phase2: f64 = rng.gen_range(0.0..(2.0 * PI));
    let chroma: Vec<f64> = (0..channels).map(|_| rng.gen_range(-0.06..0.06)).collect();
    for c in 0..channels {
        let off = chroma[c];
        let plane = img.plane_mut(c);
        for y in 0..height {
            for x in 0..width {
                let (xf, yf) = (x as f64, y as f64);
                let u1 = (xf * theta1.cos() + yf * theta1.sin()) / lambda1;
                let u2 = (xf * theta2.cos() + yf * theta2.sin()) / lambda2;
                plane[y * width + x] = 0.5
                    + off
                    + amp1 * (2.0 * PI * u1 + phase1).sin()
                    + amp2 * (2.0 * PI * u2 + phase2).sin();
            }
        }
    }

    // flat shapes with hard edges
    let shapes = rng.gen_range(4..8);
    for _ in 0..shapes {
        let vals: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.08..0.92)).collect();
        if rng.gen_bool(0.5) {
            // disk
            let cx = rng.gen_range(0.0..wf);
            let cy = rng.gen_range(0.0..hf);
            let r = rng.gen_range(0.06..0.22) * wf.min(hf);
            for c in 0..channels {
                let plane = img.plane_mut(c);
                for y in 0..height {
                    for x in 0..width {
                        let dx = x as f64 - cx;
                        let dy = y as f64 - cy;
                        if dx * dx + dy * dy <= r * r {
                            plane[y * width + x] = vals[c];
                        }
                    }
                }
            }
        } else {
            // axis-aligned rectangle
            let x0 = rng.gen_range(0..width);
            let y0 = rng.gen_range(0..height);
            let x1 = (x0 + rng.gen_range(width / 8 + 1..width / 2 + 2)).min(width);
            let y1 = (y0 + rng.gen_range(height / 8 + 1..height / 2 + 2)).min(height);
            for c in 0..channels {
                let plane = img.plane_mut(c);
                for y in y0..y1 {
                    for x in x0..x1 {
                        plane[y * width + x] = vals[c];
                    }
                }
            }
        }
    }

    // one high-frequency textured band
    let band_y0 = rng.gen_range(0..height.max(2) / 2);
    let band_y1 = (band_y0 + height / 3 + 1).min(height);
    let tex_theta: f64 = rng.gen_range(0.0..PI);
    let tex_lambda = rng.gen_range(2.5..6.0);
    let tex_amp = rng.gen_range(0.08..0.15);
    for c in 0..channels {
        let plane = img.plane_mut(c);
        for y in band_y0..band_y1 {
            for x in 0..width {
                let u = (x as f64 * tex_theta.cos() + y as f64 * tex_theta.sin()) / tex_lambda;
                plane[y * width + x] += tex_amp * (2.0 * PI * u).sin();
            }
        }
    }

    for v in img.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Writes `count` synthetic scenes as 16-bit PNGs into `dir` (created if
/// missing) and returns the file paths in index order.
pub fn write_dataset(
    dir: &Path,
    count: usize,
    width: usize,
    height: usize,
    channels: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let img = synth_scene(width, height, channels, seed.wrapping_add(i as u64));
        let path = dir.join(format!("scene_{i:04}.png"));
        save_image_depth(&img, &path, BitDepth::Sixteen)?;
        paths.push(path);
    }
    Ok(paths)
}
