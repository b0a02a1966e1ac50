//! Procedural splicing forgeries with exact ground-truth masks.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::DatasetLayout;
use crate::error::{Error, Result};
use crate::imgproc::{write_mask, write_png, BinaryMask, Image};

/// Knobs of the generator; the defaults are what `synth` writes to disk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    /// Host sensor-noise std range.
    pub host_noise: (f64, f64),
    /// Donor noise as a multiple of the host noise.
    pub donor_noise_factor: (f64, f64),
    /// Spliced region radius as a fraction of the image side.
    pub region_radius: (f64, f64),
    /// Probability of softening the splice boundary.
    pub boundary_blur_prob: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            host_noise: (2.0, 5.0),
            donor_noise_factor: (4.0, 6.0),
            region_radius: (0.18, 0.32),
            boundary_blur_prob: 0.3,
        }
    }
}

fn rgb(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random_range(30.0..225.0), rng.random_range(30.0..225.0), rng.random_range(30.0..225.0)]
}

/// Gradient background, a sinusoidal texture, a few flat shapes and
/// Gaussian noise of std `noise`.
pub fn procedural_image(size: usize, noise: f64, rng: &mut impl Rng) -> Image {
    let (c0, c1) = (rgb(rng), rgb(rng));
    let angle = rng.random_range(0.0..2.0 * PI);
    let (ux, uy) = (angle.cos(), angle.sin());
    let freq = rng.random_range(0.03..0.15);
    let amp = rng.random_range(5.0..25.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let s = size as f64;
    let mut px = vec![[0.0f64; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f64 * ux + y as f64 * uy) / s).clamp(-1.0, 1.0) * 0.5 + 0.5;
            let tex = amp * (freq * x as f64 + phase).sin() * (freq * 0.7 * y as f64).cos();
            for c in 0..3 {
                px[y * size + x][c] = c0[c] * (1.0 - t) + c1[c] * t + tex;
            }
        }
    }
    for _ in 0..rng.random_range(1..=3) {
        let col = rgb(rng);
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let r = rng.random_range(0.08..0.25) * s;
        let circle = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if circle { dx * dx + dy * dy <= r * r } else { dx.abs() <= r && dy.abs() <= r * 0.6 };
                if inside {
                    px[y * size + x] = col;
                }
            }
        }
    }
    let normal = Normal::new(0.0, noise).expect("positive noise std");
    let data = px
        .iter()
        .flat_map(|p| *p)
        .map(|v| (v + normal.sample(rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    Image::new(size, size, 3, data).expect("consistent size")
}

/// Random star-shaped polygon centred in the image.
pub fn polygon_mask(size: usize, radius: (f64, f64), rng: &mut impl Rng) -> BinaryMask {
    let s = size as f64;
    let r_mean = rng.random_range(radius.0..radius.1) * s;
    let margin = r_mean * 1.3;
    let cx = rng.random_range(margin.min(s / 2.0)..(s - margin).max(s / 2.0 + 1e-9));
    let cy = rng.random_range(margin.min(s / 2.0)..(s - margin).max(s / 2.0 + 1e-9));
    let k = rng.random_range(5..=8);
    let verts: Vec<(f64, f64)> = (0..k)
        .map(|i| {
            let a = 2.0 * PI * (i as f64 + rng.random_range(-0.3..0.3)) / k as f64;
            let r = r_mean * rng.random_range(0.7..1.3);
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();
    BinaryMask::from_fn(size, size, |x, y| point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &verts))
}

fn point_in_polygon(px: f64, py: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Copies `donor` pixels at `mask + offset` into `host` under `mask`.
/// With `blur_boundary` the pixels on the region's inner and outer rim are
/// replaced by their 3×3 mean.
pub fn splice(host: &Image, donor: &Image, mask: &BinaryMask, offset: (isize, isize), blur_boundary: bool) -> Result<Image> {
    let (w, h) = (host.width(), host.height());
    if donor.width() != w || donor.height() != h || mask.width() != w || mask.height() != h || host.channels() != donor.channels() {
        return Err(Error::shape("splice", "host, donor and mask must share dimensions"));
    }
    let mut out = host.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                let sx = (x as isize + offset.0).clamp(0, w as isize - 1) as usize;
                let sy = (y as isize + offset.1).clamp(0, h as isize - 1) as usize;
                out.pixel_mut(x, y).copy_from_slice(donor.pixel(sx, sy));
            }
        }
    }
    if blur_boundary {
        let src = out.clone();
        let ch = out.channels();
        for y in 0..h {
            for x in 0..w {
                let m = mask.get(x, y);
                let rim = (-1..=1isize).any(|dy| {
                    (-1..=1isize).any(|dx| {
                        let (nx, ny) = (x as isize + dx, y as isize + dy);
                        nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize && mask.get(nx as usize, ny as usize) != m
                    })
                });
                if !rim {
                    continue;
                }
                for c in 0..ch {
                    let (mut acc, mut cnt) = (0u32, 0u32);
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (nx, ny) = (x as isize + dx, y as isize + dy);
                            if nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize {
                                acc += src.pixel(nx as usize, ny as usize)[c] as u32;
                                cnt += 1;
                            }
                        }
                    }
                    out.pixel_mut(x, y)[c] = ((acc + cnt / 2) / cnt) as u8;
                }
            }
        }
    }
    Ok(out)
}

/// One authentic image drawn from the `index`-th stream of `seed`.
pub fn authentic_sample(size: usize, seed: u64, index: u64, opts: &SynthOptions) -> Image {
    let mut rng = stream(seed, 2 * index);
    let noise = rng.random_range(opts.host_noise.0..=opts.host_noise.1);
    procedural_image(size, noise, &mut rng)
}

/// One spliced image and its mask drawn from the `index`-th stream of `seed`.
pub fn manipulated_sample(size: usize, seed: u64, index: u64, opts: &SynthOptions) -> Result<(Image, BinaryMask)> {
    let mut rng = stream(seed, 2 * index + 1);
    let noise = rng.random_range(opts.host_noise.0..=opts.host_noise.1);
    let host = procedural_image(size, noise, &mut rng);
    let factor = rng.random_range(opts.donor_noise_factor.0..=opts.donor_noise_factor.1);
    let donor = procedural_image(size, noise * factor, &mut rng);
    let mask = polygon_mask(size, opts.region_radius, &mut rng);
    let max_off = (size / 8) as i64;
    let offset = (
        rng.random_range(-max_off..=max_off) as isize,
        rng.random_range(-max_off..=max_off) as isize,
    );
    let blur = rng.random_bool(opts.boundary_blur_prob);
    Ok((splice(&host, &donor, &mask, offset, blur)?, mask))
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Textured host with one flat-coloured pasted region; returns the image
/// and the exact region mask.
pub fn uniform_paste_scene(size: usize, seed: u64) -> (Image, BinaryMask) {
    let mut rng = stream(seed ^ 0x5eed, 0);
    let noise = rng.random_range(2.0..5.0);
    let host = procedural_image(size, noise, &mut rng);
    let mask = polygon_mask(size, (0.15, 0.28), &mut rng);
    let host_mean: Vec<f64> = (0..3)
        .map(|c| host.data().iter().skip(c).step_by(3).map(|&v| v as f64).sum::<f64>() / (size * size) as f64)
        .collect();
    // keep the paste well separated from the average host colour
    let color: Vec<u8> = host_mean.iter().map(|&m| if m > 128.0 { rng.random_range(0..40) } else { rng.random_range(215..=255) }).collect();
    let mut img = host;
    for y in 0..size {
        for x in 0..size {
            if mask.get(x, y) {
                img.pixel_mut(x, y).copy_from_slice(&color);
            }
        }
    }
    (img, mask)
}

/// Writes `n/2` authentic and `n/2` spliced images (plus masks) under `root`.
pub fn synth_forgery_generate(root: impl AsRef<Path>, n: usize, size: usize, seed: u64) -> Result<DatasetLayout> {
    synth_with_options(root, n, size, seed, &SynthOptions::default())
}

pub fn synth_with_options(root: impl AsRef<Path>, n: usize, size: usize, seed: u64, opts: &SynthOptions) -> Result<DatasetLayout> {
    write_corpus(root.as_ref(), n, size, seed, opts, |i| manipulated_sample(size, seed, i, opts))
}

/// Like [`synth_forgery_generate`] but every manipulated image is a
/// [`uniform_paste_scene`].
pub fn synth_uniform_paste(root: impl AsRef<Path>, n: usize, size: usize, seed: u64) -> Result<DatasetLayout> {
    let base = seed.wrapping_mul(1_000_003);
    write_corpus(root.as_ref(), n, size, seed, &SynthOptions::default(), |i| {
        Ok(uniform_paste_scene(size, base.wrapping_add(i)))
    })
}

fn write_corpus(
    root: &Path,
    n: usize,
    size: usize,
    seed: u64,
    opts: &SynthOptions,
    manipulated: impl Fn(u64) -> Result<(Image, BinaryMask)>,
) -> Result<DatasetLayout> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("image count must be even and positive, got {n}")));
    }
    if size < 32 {
        return Err(Error::InvalidArgument(format!("image size must be at least 32, got {size}")));
    }
    let layout = DatasetLayout::new(root);
    for dir in [layout.authentic_dir(), layout.manipulated_dir(), layout.masks_dir()] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for i in 0..n / 2 {
        let a = authentic_sample(size, seed, i as u64, opts);
        write_png(layout.authentic_dir().join(format!("a_{i:05}.png")), &a)?;
        let (m, mask) = manipulated(i as u64)?;
        let name = format!("m_{i:05}.png");
        write_png(layout.manipulated_dir().join(&name), &m)?;
        write_mask(layout.masks_dir().join(&name), &mask)?;
    }
    Ok(layout)
}
