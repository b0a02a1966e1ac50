use std::sync::OnceLock;

use super::Image;
use crate::error::{Error, Result};

/// Standard JPEG luminance quantization table, row-major.
pub const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance table scaled with the IJG quality formula.
pub fn quantization_table(quality: u8) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!("jpeg quality {quality} outside 1..=100")));
    }
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(&LUMA_QUANT) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(out)
}

/// `basis[u][x] = c(u) · cos((2x+1)uπ/16)`, orthonormal.
fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = c * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        b
    })
}

fn dct2(block: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

fn idct2(coef: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| b[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

/// Lossy round trip through quantized 8×8 DCT blocks, each channel coded
/// independently with the luminance table. Partial border blocks are
/// edge-extended before coding.
pub fn jpeg_like_compress(img: &Image, quality: u8) -> Result<Image> {
    let table = quantization_table(quality)?;
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut out = img.clone();
    let data = img.data();
    let mut block = [0.0f64; 64];
    for c in 0..ch {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for y in 0..8 {
                    for x in 0..8 {
                        let sy = (by + y).min(h - 1);
                        let sx = (bx + x).min(w - 1);
                        block[y * 8 + x] = data[(sy * w + sx) * ch + c] as f64 - 128.0;
                    }
                }
                let mut coef = dct2(&block);
                for (k, q) in coef.iter_mut().zip(&table) {
                    *k = (*k / q).round() * q;
                }
                let rec = idct2(&coef);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        let v = (rec[y * 8 + x] + 128.0).round().clamp(0.0, 255.0);
                        out.data_mut()[((by + y) * w + bx + x) * ch + c] = v as u8;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Deterministic RGB image with smooth gradients, fine texture and a sharp
/// disc, used to check codec error against quality.
pub fn reference_image(w: usize, h: usize) -> Image {
    let data = (0..w * h * 3)
        .map(|i| {
            let p = i / 3;
            let (x, y, c) = ((p % w) as f64, (p / w) as f64, (i % 3) as f64);
            let v = 120.0
                + 50.0 * (x * 0.21 + c).sin() * (y * 0.13).cos()
                + 30.0 * ((x + y) * 0.7).sin()
                + if (x - 20.0).powi(2) + (y - 25.0).powi(2) < 100.0 { 60.0 } else { 0.0 };
            v.clamp(0.0, 255.0) as u8
        })
        .collect();
    Image::new(w, h, 3, data).expect("w * h * 3 bytes")
}
