use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CamClass, CamMap};
use crate::error::{Error, Result};

pub const CAMF_MAGIC: &[u8; 4] = b"CAMF";

/// JSON written next to every `.camf` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamSidecar {
    pub class: CamClass,
    pub scales: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub min: f64,
    pub max: f64,
}

/// `CAMF`, u32 height, u32 width, then the raw map as little-endian f32.
pub fn encode_camf(map: &CamMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.raw.len());
    out.extend_from_slice(CAMF_MAGIC);
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    for v in &map.raw {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Returns `(height, width, values)`.
pub fn decode_camf(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < 12 || &bytes[..4] != CAMF_MAGIC {
        return Err(Error::Format { what: "CAMF", detail: "bad magic or short header".into() });
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (word(4), word(8));
    let body = &bytes[12..];
    if body.len() != h * w * 4 {
        return Err(Error::Format {
            what: "CAMF",
            detail: format!("{h}x{w} expects {} value bytes, found {}", h * w * 4, body.len()),
        });
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((h, w, values))
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_camf(path: &Path, map: &CamMap, scales: &[usize]) -> Result<()> {
    std::fs::write(path, encode_camf(map)).map_err(|e| Error::io(path, e))?;
    let (min, max) = map.raw_bounds();
    let side = CamSidecar {
        class: map.class,
        scales: scales.to_vec(),
        height: map.height,
        width: map.width,
        min,
        max,
    };
    let json = serde_json::to_string_pretty(&side)?;
    let sp = sidecar_path(path);
    std::fs::write(&sp, json).map_err(|e| Error::io(&sp, e))
}

pub fn read_camf(path: &Path) -> Result<(usize, usize, Vec<f32>, CamSidecar)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, w, values) = decode_camf(&bytes)?;
    let sp = sidecar_path(path);
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    Ok((h, w, values, serde_json::from_str(&text)?))
}
