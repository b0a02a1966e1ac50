use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::PromptSet;
use crate::error::Result;
use crate::imgproc::{BinaryMask, Image};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionGrowParams {
    /// Largest Euclidean RGB distance from the seed colour a pixel may have.
    pub color_threshold: f64,
}

impl Default for RegionGrowParams {
    fn default() -> Self {
        Self { color_threshold: 40.0 }
    }
}

/// Mean colour of the 3×3 neighbours lying within `radius` of the centre pixel.
fn local_color(img: &Image, x: usize, y: usize, radius: f64) -> [f64; 3] {
    let centre: Vec<f64> = img.pixel(x, y).iter().map(|&v| v as f64).collect();
    let centre = [centre[0], centre[1], centre[2]];
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for yy in y.saturating_sub(1)..=(y + 1).min(img.height() - 1) {
        for xx in x.saturating_sub(1)..=(x + 1).min(img.width() - 1) {
            let c = img.pixel(xx, yy);
            if dist(c, &centre) <= radius {
                for (a, v) in acc.iter_mut().zip(c) {
                    *a += *v as f64;
                }
                n += 1.0;
            }
        }
    }
    acc.map(|a| a / n)
}

fn dist(c: &[u8], m: &[f64; 3]) -> f64 {
    c.iter().zip(m).map(|(a, b)| (*a as f64 - b).powi(2)).sum::<f64>().sqrt()
}

/// Four-connected flood from the positive point (or, without one, from the
/// coarse pixel nearest the box centre). A pixel joins when it lies in the
/// box, is within the colour threshold of the seed colour, and is closer to
/// the seed colour than to the negative point's colour.
pub fn region_grow(image: &Image, prompts: &PromptSet, coarse: &BinaryMask, params: &RegionGrowParams) -> Result<BinaryMask> {
    let img = image.to_rgb();
    let (w, h) = (img.width(), img.height());
    let in_box = |x: usize, y: usize| prompts.bbox.is_none_or(|b| b.contains(x, y));
    let seed = match prompts.positive() {
        Some(p) => (p.x, p.y),
        None => {
            let (cx, cy) = prompts.bbox.map(|b| b.center()).unwrap_or((w / 2, h / 2));
            let mut best = (cx, cy);
            let mut best_d = usize::MAX;
            for y in 0..h {
                for x in 0..w {
                    if coarse.get(x, y) && in_box(x, y) {
                        let d = x.abs_diff(cx).pow(2) + y.abs_diff(cy).pow(2);
                        if d < best_d {
                            best_d = d;
                            best = (x, y);
                        }
                    }
                }
            }
            best
        }
    };
    let seed_col = local_color(&img, seed.0, seed.1, params.color_threshold);
    let neg = prompts.negative().map(|p| ((p.x, p.y), local_color(&img, p.x, p.y, params.color_threshold)));

    let mut out = BinaryMask::empty(w, h);
    out.set(seed.0, seed.1, true);
    let mut queue = VecDeque::from([seed]);
    while let Some((x, y)) = queue.pop_front() {
        let neighbours = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in neighbours {
            if nx >= w || ny >= h || out.get(nx, ny) || !in_box(nx, ny) {
                continue;
            }
            let c = img.pixel(nx, ny);
            let d = dist(c, &seed_col);
            if d > params.color_threshold {
                continue;
            }
            if let Some((np, ncol)) = &neg {
                if (nx, ny) == *np || d >= dist(c, ncol) {
                    continue;
                }
            }
            out.set(nx, ny, true);
            queue.push_back((nx, ny));
        }
    }
    Ok(out)
}
