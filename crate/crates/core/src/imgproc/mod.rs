//! Deterministic image kernels: edge operators, blur, resampling, the
//! JPEG-like codec and connected-component analysis.

mod blur;
mod components;
mod edge;
mod io;
mod jpeg;
mod resize;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use blur::{gaussian_blur, gaussian_blur_plane, gaussian_kernel, gaussian_sigma};
pub use components::{connected_components, label_components, largest_component_bbox, Component, Connectivity, Labeling};
pub use edge::{edge_filter, prewitt_filter, sobel_filter, EdgeOperator};
pub use io::{decode_mask_png, decode_png, encode_mask_png, encode_png, read_mask, read_png, write_mask, write_png};
pub use jpeg::{jpeg_like_compress, quantization_table, reference_image, LUMA_QUANT};
pub use resize::{bilinear_resize, resize_plane};

/// 8-bit raster, row-major, interleaved channels (1 = gray, 3 = RGB).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(
                "image",
                format!("{width}x{height}x{channels} needs {} bytes, got {}", width * height * channels, data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Always returns a 3-channel image (gray is replicated).
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// One float plane per channel, values in `0..=255`.
    pub fn planes(&self) -> Vec<Vec<f32>> {
        (0..self.channels)
            .map(|c| self.data.iter().skip(c).step_by(self.channels).map(|&v| v as f32).collect())
            .collect()
    }

    /// Inverse of [`Image::planes`]: rounds and clamps into bytes.
    pub fn from_planes(width: usize, height: usize, planes: &[Vec<f32>]) -> Result<Image> {
        let channels = planes.len();
        let mut data = vec![0u8; width * height * channels];
        for (c, plane) in planes.iter().enumerate() {
            if plane.len() != width * height {
                return Err(Error::shape("from_planes", "plane size does not match dimensions"));
            }
            for (i, v) in plane.iter().enumerate() {
                data[i * channels + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        Image::new(width, height, channels, data)
    }

    /// `[1,3,H,W]` tensor scaled to `[-0.5, 0.5]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let rgb = self.to_rgb();
        let mut data = Vec::with_capacity(3 * self.width * self.height);
        for plane in rgb.planes() {
            data.extend(plane.into_iter().map(|v| v / 255.0 - 0.5));
        }
        Tensor::new(vec![1, 3, self.height, self.width], data).expect("consistent image shape")
    }
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn center(&self) -> (usize, usize) {
        ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)
    }
}

/// Per-pixel manipulated flag; `true` = manipulated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::shape(
                "mask",
                format!("{width}x{height} mask with {} values", data.len()),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, data }
    }

    pub fn from_bbox(width: usize, height: usize, b: BBox) -> Self {
        Self::from_fn(width, height, |x, y| b.contains(x, y))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.contains(&true)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Tight bounding box of all true pixels.
    pub fn bbox(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let bb = b.get_or_insert(BBox { x0: x, y0: y, x1: x, y1: y });
                    bb.x0 = bb.x0.min(x);
                    bb.x1 = bb.x1.max(x);
                    bb.y1 = bb.y1.max(y);
                }
            }
        }
        b
    }

    /// `self ⊆ other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| !a || *b)
    }

    pub fn intersect(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let inter = self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count();
        let union = self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Nearest-neighbour resampling with pixel-center alignment.
    pub fn resize_nearest(&self, width: usize, height: usize) -> BinaryMask {
        BinaryMask::from_fn(width, height, |x, y| {
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64).floor() as usize;
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64).floor() as usize;
            self.get(sx.min(self.width - 1), sy.min(self.height - 1))
        })
    }
}
