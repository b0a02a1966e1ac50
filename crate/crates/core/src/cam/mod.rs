//! Class activation maps for both branches, attention-guided fusion and
//! multi-scale aggregation.

mod dump;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{resize_plane, Image};
use crate::model::{batch_tensor, BranchOutputs, Model};
use crate::tensor::{Scalar, Tape, Tensor};

pub use dump::{decode_camf, encode_camf, read_camf, write_camf, CamSidecar, CAMF_MAGIC};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamClass {
    Authentic,
    #[default]
    Manipulated,
}

impl CamClass {
    /// Row of the head weight matrix.
    pub fn index(self) -> usize {
        match self {
            CamClass::Authentic => 0,
            CamClass::Manipulated => 1,
        }
    }
}

/// Min-max scaling into `[0,1]`; a constant input maps to all zeros.
pub fn min_max_normalize(raw: &[f64]) -> Vec<f64> {
    let (lo, hi) = bounds(raw);
    if hi > lo {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

fn bounds(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// A row-major activation map kept in both raw and `[0,1]` form.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    pub class: CamClass,
    pub width: usize,
    pub height: usize,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl CamMap {
    pub fn from_raw(class: CamClass, width: usize, height: usize, raw: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || raw.len() != width * height {
            return Err(Error::shape("cam", format!("{width}x{height} map with {} values", raw.len())));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cam"));
        }
        let normalized = min_max_normalize(&raw);
        Ok(Self {
            class,
            width,
            height,
            raw,
            normalized,
        })
    }

    /// `(min, max)` of the raw map.
    pub fn raw_bounds(&self) -> (f64, f64) {
        bounds(&self.raw)
    }

    pub fn raw_at(&self, x: usize, y: usize) -> f64 {
        self.raw[y * self.width + x]
    }

    pub fn normalized_at(&self, x: usize, y: usize) -> f64 {
        self.normalized[y * self.width + x]
    }

    /// First row-major position of the largest raw value, as `(x, y)`.
    pub fn argmax(&self) -> (usize, usize) {
        self.arg_by(|a, b| a > b)
    }

    /// First row-major position of the smallest raw value, as `(x, y)`.
    pub fn argmin(&self) -> (usize, usize) {
        self.arg_by(|a, b| a < b)
    }

    fn arg_by(&self, better: impl Fn(f64, f64) -> bool) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.raw.iter().enumerate() {
            if better(v, self.raw[best]) {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// Bilinear resampling of both forms; the normalized one is rescaled to
    /// span [0, 1] again.
    pub fn resize(&self, width: usize, height: usize) -> Result<CamMap> {
        Ok(CamMap {
            class: self.class,
            width,
            height,
            raw: resize_plane(&self.raw, self.width, self.height, width, height)?,
            normalized: min_max_normalize(&resize_plane(&self.normalized, self.width, self.height, width, height)?),
        })
    }

    /// Block-mean downsampling of the raw map by an integer factor.
    pub fn avg_pool(&self, factor: usize) -> Result<CamMap> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::shape(
                "cam pool",
                format!("{}x{} is not divisible by {factor}", self.width, self.height),
            ));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let mut raw = vec![0.0; w * h];
        for y in 0..self.height {
            for x in 0..self.width {
                raw[(y / factor) * w + x / factor] += self.raw_at(x, y) * inv;
            }
        }
        CamMap::from_raw(self.class, w, h, raw)
    }
}

fn head_row<T: Scalar>(weights: &Tensor<T>, features: usize, class: CamClass) -> Result<Vec<f64>> {
    if weights.shape() != [2, features] {
        return Err(Error::shape(
            "cam",
            format!("head weights {:?} do not match {features} features", weights.shape()),
        ));
    }
    let r = class.index();
    Ok(weights.data()[r * features..(r + 1) * features].iter().map(|v| v.as_f64()).collect())
}

/// Weighted channel sum of `[C,h,w]` features with one row of `[2,C]` head weights.
pub fn conv_cam<T: Scalar>(features: &Tensor<T>, weights: &Tensor<T>, class: CamClass) -> Result<CamMap> {
    let [c, h, w] = features.shape() else {
        return Err(Error::shape("conv_cam", format!("expected [C,h,w], got {:?}", features.shape())));
    };
    let (c, h, w) = (*c, *h, *w);
    let row = head_row(weights, c, class)?;
    let mut raw = vec![0.0; h * w];
    for (k, plane) in features.data().chunks(h * w).enumerate() {
        for (r, v) in raw.iter_mut().zip(plane) {
            *r += row[k] * v.as_f64();
        }
    }
    CamMap::from_raw(class, w, h, raw)
}

/// Per-token head score over `[P,D]` patch tokens, laid out on the square patch grid.
pub fn trans_cam<T: Scalar>(patch_tokens: &Tensor<T>, weights: &Tensor<T>, class: CamClass) -> Result<CamMap> {
    let [p, d] = patch_tokens.shape() else {
        return Err(Error::shape("trans_cam", format!("expected [P,D], got {:?}", patch_tokens.shape())));
    };
    let (p, d) = (*p, *d);
    let side = p.isqrt();
    if side * side != p {
        return Err(Error::shape("trans_cam", format!("{p} patch tokens do not form a square grid")));
    }
    let row = head_row(weights, d, class)?;
    let raw = patch_tokens
        .data()
        .chunks(d)
        .map(|t| t.iter().zip(&row).map(|(a, b)| a.as_f64() * b).sum())
        .collect();
    CamMap::from_raw(class, side, side, raw)
}

/// Row-stochastic patch-to-patch affinity.
#[derive(Clone, Debug, PartialEq)]
pub struct Affinity {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Affinity {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.size..(i + 1) * self.size]
    }

    /// `A · v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.size {
            return Err(Error::shape("affinity", format!("{} x {} applied to {}", self.size, self.size, v.len())));
        }
        Ok((0..self.size)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Mean over layers and heads of `softmax(Q Kᵀ / sqrt(D/S))`, with the class
/// token dropped and rows renormalized. Each `Q`/`K` is `[T,D]`.
pub fn attention_average<T: Scalar>(
    queries: &[Tensor<T>],
    keys: &[Tensor<T>],
    dim: usize,
    heads: usize,
) -> Result<Affinity> {
    if queries.is_empty() || queries.len() != keys.len() {
        return Err(Error::InvalidArgument(format!(
            "{} query layers vs {} key layers",
            queries.len(),
            keys.len()
        )));
    }
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::InvalidArgument(format!("dim {dim} is not divisible by {heads} heads")));
    }
    let t = queries[0].shape().first().copied().unwrap_or(0);
    if t < 2 {
        return Err(Error::shape("attention_average", "need a class token and at least one patch"));
    }
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut acc = vec![0.0; t * t];
    for (q, k) in queries.iter().zip(keys) {
        if q.shape() != [t, dim] || k.shape() != [t, dim] {
            return Err(Error::shape(
                "attention_average",
                format!("expected [{t},{dim}], got {:?} and {:?}", q.shape(), k.shape()),
            ));
        }
        let (q, k) = (q.data(), k.data());
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t {
                let qi = &q[i * dim..][cols.clone()];
                let mut row: Vec<f64> = (0..t)
                    .map(|j| {
                        let kj = &k[j * dim..][cols.clone()];
                        qi.iter().zip(kj).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() * scale
                    })
                    .collect();
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in &mut row {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for (a, v) in acc[i * t..(i + 1) * t].iter_mut().zip(&row) {
                    *a += v / s;
                }
            }
        }
    }
    let n = t - 1;
    let mut data = Vec::with_capacity(n * n);
    for i in 1..t {
        let row = &acc[i * t + 1..(i + 1) * t];
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Ok(Affinity { size: n, data })
}

/// Spreads the conv map through the affinity and unions it with the
/// transformer map. The raw form is the refined conv map.
pub fn fuse_cam(trans: &CamMap, conv: &CamMap, affinity: &Affinity) -> Result<CamMap> {
    if (trans.width, trans.height) != (conv.width, conv.height) || affinity.size != conv.raw.len() {
        return Err(Error::shape(
            "fuse_cam",
            format!(
                "trans {}x{}, conv {}x{}, affinity {}",
                trans.width, trans.height, conv.width, conv.height, affinity.size
            ),
        ));
    }
    let refined = CamMap::from_raw(conv.class, conv.width, conv.height, affinity.apply(&conv.raw)?)?;
    let normalized = trans
        .normalized
        .iter()
        .zip(&refined.normalized)
        .map(|(a, b)| a.max(*b))
        .collect();
    Ok(CamMap { normalized, ..refined })
}

/// The three maps produced for one image of a forward pass, on the patch grid.
#[derive(Clone, Debug)]
pub struct CamSet {
    pub trans: CamMap,
    /// Conv map pooled from feature resolution to the patch grid.
    pub conv: CamMap,
    pub affinity: Affinity,
    pub fused: CamMap,
}

/// CAMs of image `index` of a recorded forward pass.
pub fn cams_from_outputs<T: Scalar>(
    model: &Model<T>,
    tape: &Tape<T>,
    out: &BranchOutputs<T>,
    index: usize,
    class: CamClass,
) -> Result<CamSet> {
    let last = *out.normed_features.last().ok_or_else(|| Error::shape("cam", "model has no blocks"))?;
    let feats = tape.value(last).select(index);
    let conv_full = conv_cam(&feats, model.params.get(model.conv_head.weight), class)?;
    let (rows, cols) = out.grid;
    if conv_full.height % rows != 0 || conv_full.height / rows != conv_full.width / cols {
        return Err(Error::shape("cam", "feature map does not tile the patch grid"));
    }
    let conv = conv_full.avg_pool(conv_full.height / rows)?;

    let tokens = tape.value(out.normed_tokens).select(index);
    let (t, d) = (tokens.shape()[0], tokens.shape()[1]);
    let patches = Tensor::new(vec![t - 1, d], tokens.data()[d..].to_vec())?;
    let trans = trans_cam(&patches, model.params.get(model.trans_head.weight), class)?;

    let qs: Vec<_> = out.queries.iter().map(|q| q.select(index)).collect();
    let ks: Vec<_> = out.keys.iter().map(|k| k.select(index)).collect();
    let affinity = attention_average(&qs, &ks, model.config.token_dim, model.config.heads)?;
    let fused = fuse_cam(&trans, &conv, &affinity)?;
    Ok(CamSet {
        trans,
        conv,
        affinity,
        fused,
    })
}

/// Averages maps resized to `width × height`. Raw is the plain mean; the
/// normalized map is the mean of the per-map normalized forms, rescaled to
/// span [0, 1] again.
pub fn aggregate_maps(maps: &[CamMap], width: usize, height: usize) -> Result<CamMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("no maps to aggregate".into()))?;
    let mut raw = vec![0.0; width * height];
    let mut normalized = vec![0.0; width * height];
    for m in maps {
        let r = m.resize(width, height)?;
        raw.iter_mut().zip(&r.raw).for_each(|(a, b)| *a += b);
        normalized.iter_mut().zip(&r.normalized).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / maps.len() as f64;
    Ok(CamMap {
        class: first.class,
        width,
        height,
        raw: raw.into_iter().map(|v| v * inv).collect(),
        normalized: min_max_normalize(&normalized.into_iter().map(|v| v * inv).collect::<Vec<_>>()),
    })
}

/// Fused CAM of `img` evaluated at each square input size in `scales` and
/// aggregated at the image's own resolution.
pub fn multi_scale_cam<T: Scalar>(model: &Model<T>, img: &Image, scales: &[usize], class: CamClass) -> Result<CamMap> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("scale list is empty".into()));
    }
    let mut maps = Vec::with_capacity(scales.len());
    for &s in scales {
        model.config.check_input(s)?;
        let (tape, out) = model.run(batch_tensor(&[img], s)?)?;
        maps.push(cams_from_outputs(model, &tape, &out, 0, class)?.fused);
    }
    aggregate_maps(&maps, img.width(), img.height())
}

#[cfg(test)]
mod tests;
