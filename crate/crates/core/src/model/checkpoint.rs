//! Binary checkpoint: `FLOC1`, length-prefixed JSON config, then named
//! little-endian f32 tensors.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"FLOC1";

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad("field exceeds u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Layout per tensor: name length, name, rank, dims, element count, values.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = serde_json::to_vec(&model.config)?;
    put_u32(&mut out, cfg.len())?;
    out.extend_from_slice(&cfg);
    put_u32(&mut out, model.params.len())?;
    for (name, t) in model.params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        put_u32(&mut out, t.numel())?;
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Rebuilds the model from its stored config and overwrites every parameter.
pub fn load_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(5)? != CHECKPOINT_MAGIC {
        return Err(bad("missing FLOC1 magic"));
    }
    let cfg_len = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    let mut model = Model::<T>::new(config, 0)?;
    let count = r.u32()?;
    if count != model.params.len() {
        return Err(bad(format!("{count} tensors stored, model has {}", model.params.len())));
    }
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("name is not utf-8"))?.to_owned();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = r.u32()?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let id = model.params.find(&name).ok_or_else(|| bad(format!("unknown tensor {name}")))?;
        model.params.set(id, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(model)
}

pub fn write_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &Model<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, save_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    load_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = ModelConfig {
            num_blocks: 2,
            cabl_depth: 1,
            ..ModelConfig::default()
        };
        let m = Model::<f32>::new(cfg, 42).unwrap();
        let bytes = save_checkpoint(&m).unwrap();
        assert_eq!(&bytes[..5], b"FLOC1");
        let back: Model<f32> = load_checkpoint(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        for (a, b) in back.params.values().iter().zip(m.params.values()) {
            assert_eq!(a, b);
        }
        assert_eq!(save_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let m = Model::<f32>::new(ModelConfig { num_blocks: 1, cabl_depth: 1, ..ModelConfig::default() }, 1).unwrap();
        let bytes = save_checkpoint(&m).unwrap();
        assert!(load_checkpoint::<f32>(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(load_checkpoint::<f32>(&wrong).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(load_checkpoint::<f32>(&extra).is_err());
    }
}
