use super::Image;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Align-corners-false bilinear resampling of a single float plane.
pub fn resize_plane<T: Scalar>(plane: &[T], width: usize, height: usize, new_w: usize, new_h: usize) -> Result<Vec<T>> {
    if new_w == 0 || new_h == 0 {
        return Err(Error::InvalidArgument("resize target dims must be positive".into()));
    }
    if width == 0 || height == 0 || plane.len() != width * height {
        return Err(Error::shape("bilinear_resize", "plane size does not match dimensions"));
    }
    if new_w == width && new_h == height {
        return Ok(plane.to_vec());
    }
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let xs = axis(new_w, width);
    let ys = axis(new_h, height);
    let mut out = Vec::with_capacity(new_w * new_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let at = |y: usize, x: usize| plane[y * width + x].as_f64();
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push(T::lit(top * (1.0 - fy) + bot * fy));
        }
    }
    Ok(out)
}

pub fn bilinear_resize(img: &Image, new_w: usize, new_h: usize) -> Result<Image> {
    let planes = img
        .planes()
        .iter()
        .map(|p| resize_plane(p, img.width(), img.height(), new_w, new_h))
        .collect::<Result<Vec<_>>>()?;
    Image::from_planes(new_w, new_h, &planes)
}
