use super::Image;
use crate::error::{Error, Result};

/// `0.3·((k−1)·0.5 − 1) + 0.8`, the usual size-to-sigma rule.
pub fn gaussian_sigma(kernel_size: usize) -> f64 {
    0.3 * ((kernel_size as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

/// Normalized 1-D Gaussian taps for an odd `kernel_size`.
pub fn gaussian_kernel(kernel_size: usize) -> Result<Vec<f64>> {
    if kernel_size == 0 || kernel_size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "gaussian kernel size must be odd, got {kernel_size}"
        )));
    }
    let sigma = gaussian_sigma(kernel_size);
    let r = (kernel_size / 2) as f64;
    let taps: Vec<f64> = (0..kernel_size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Separable blur of one float plane, replicate padded. `k = 0` copies.
pub fn gaussian_blur_plane(plane: &[f32], width: usize, height: usize, kernel_size: usize) -> Result<Vec<f32>> {
    if plane.len() != width * height {
        return Err(Error::shape("gaussian_blur", "plane size does not match dimensions"));
    }
    if kernel_size == 0 {
        return Ok(plane.to_vec());
    }
    let taps = gaussian_kernel(kernel_size)?;
    let r = (kernel_size / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f64; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, &wt) in taps.iter().enumerate() {
                acc += wt * plane[y * width + clamp(x as isize + t as isize - r, width)] as f64;
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0f32; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, &wt) in taps.iter().enumerate() {
                acc += wt * tmp[clamp(y as isize + t as isize - r, height) * width + x];
            }
            out[y * width + x] = acc as f32;
        }
    }
    Ok(out)
}

pub fn gaussian_blur(img: &Image, kernel_size: usize) -> Result<Image> {
    if kernel_size == 0 {
        return Ok(img.clone());
    }
    let (w, h) = (img.width(), img.height());
    let planes = img
        .planes()
        .iter()
        .map(|p| gaussian_blur_plane(p, w, h, kernel_size))
        .collect::<Result<Vec<_>>>()?;
    Image::from_planes(w, h, &planes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_rule() {
        assert!((gaussian_sigma(5) - 1.1).abs() < 1e-12);
        assert!((gaussian_sigma(3) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_kernel_is_identity() {
        let img = Image::new(3, 2, 1, vec![1, 200, 3, 4, 5, 6]).unwrap();
        assert_eq!(gaussian_blur(&img, 0).unwrap(), img);
    }

    #[test]
    fn constant_image_unchanged() {
        let img = Image::filled(9, 7, [10, 128, 250]);
        for k in [3, 5, 11, 29] {
            assert_eq!(gaussian_blur(&img, k).unwrap(), img);
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let img = Image::filled(4, 4, [0, 0, 0]);
        assert!(gaussian_blur(&img, 4).is_err());
    }

    #[test]
    fn impulse_response_sums_to_one() {
        let (w, h) = (15, 15);
        let mut plane = vec![0.0f32; w * h];
        plane[7 * w + 7] = 1.0;
        let out = gaussian_blur_plane(&plane, w, h, 5).unwrap();
        let total: f64 = out.iter().map(|&v| v as f64).sum();
        assert!((total - 1.0).abs() < 1e-6);
        // separable kernel read back from the impulse equals the outer product
        let taps = gaussian_kernel(5).unwrap();
        assert!((out[7 * w + 7] as f64 - taps[2] * taps[2]).abs() < 1e-7);
    }

    #[test]
    fn preserves_mean_of_textured_image() {
        let (w, h) = (64, 64);
        let data: Vec<u8> = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                (128.0 + 60.0 * (x * 0.3).sin() * (y * 0.2).cos() + 30.0 * (x * 0.05).cos()) as u8
            })
            .collect();
        let img = Image::new(w, h, 1, data).unwrap();
        let mean = |im: &Image| im.data().iter().map(|&v| v as f64).sum::<f64>() / (w * h) as f64;
        for k in [5, 11] {
            let b = gaussian_blur(&img, k).unwrap();
            assert!((mean(&b) - mean(&img)).abs() < 0.5, "k={k}");
        }
    }
}
