use std::fs;
use std::io::Cursor;
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use super::{BinaryMask, Image};
use crate::error::{Error, Result};

/// Decodes any 8/16-bit PNG into a gray or RGB [`Image`]; alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::normalize_to_color8());
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format { what: "png", detail: "image too large".into() })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let (channels, data) = match info.color_type {
        ColorType::Grayscale => (1, buf),
        ColorType::GrayscaleAlpha => (1, buf.chunks_exact(2).map(|p| p[0]).collect()),
        ColorType::Rgb => (3, buf),
        ColorType::Rgba => (3, buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
        other => {
            return Err(Error::Format {
                what: "png",
                detail: format!("unsupported color type {other:?}"),
            })
        }
    };
    Image::new(w, h, channels, data)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(if img.channels() == 1 { ColorType::Grayscale } else { ColorType::Rgb });
        enc.set_depth(BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(img.data())?;
        writer.finish()?;
    }
    Ok(out)
}

/// Any channel-0 value ≥ 128 reads as manipulated.
pub fn decode_mask_png(bytes: &[u8]) -> Result<BinaryMask> {
    let img = decode_png(bytes)?;
    let ch = img.channels();
    let data = img.data().iter().step_by(ch).map(|&v| v >= 128).collect();
    BinaryMask::new(img.width(), img.height(), data)
}

/// Single-channel PNG with values 0 / 255.
pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let data = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_png(&Image::new(mask.width(), mask.height(), 1, data)?)
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode_png(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    decode_mask_png(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask_png(mask)?).map_err(|e| Error::io(path, e))
}
