//! Forward and backward kernels that are too large to inline in the tape.

use serde::{Deserialize, Serialize};

use super::scalar::{matmul, Scalar};

/// Border handling for sliding-window ops. The payload is the pad width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Zero(usize),
    Replicate(usize),
}

impl Padding {
    pub fn amount(self) -> usize {
        match self {
            Padding::Zero(p) | Padding::Replicate(p) => p,
        }
    }

    /// Zero padding that keeps spatial size at stride 1.
    pub fn same_zero(kernel: usize) -> Self {
        Padding::Zero(kernel / 2)
    }

    pub fn same_replicate(kernel: usize) -> Self {
        Padding::Replicate(kernel / 2)
    }

    #[inline]
    fn source(self, pos: isize, len: usize) -> Option<usize> {
        if pos >= 0 && (pos as usize) < len {
            Some(pos as usize)
        } else {
            match self {
                Padding::Zero(_) => None,
                Padding::Replicate(_) => Some(pos.clamp(0, len as isize - 1) as usize),
            }
        }
    }
}

/// Standard convolution output size, `None` when the window never fits.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: Padding,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let pad = self.padding.amount() as isize;
        let plane = self.h * self.w;
        let cols = self.col_cols();
        for ci in 0..self.in_ch {
            let xc = &x[ci * plane..(ci + 1) * plane];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let sy = self
                            .padding
                            .source((oy * self.stride + ki) as isize - pad, self.h);
                        for ox in 0..self.wo {
                            let sx = self
                                .padding
                                .source((ox * self.stride + kj) as isize - pad, self.w);
                            dst[oy * self.wo + ox] = match (sy, sx) {
                                (Some(y), Some(x)) => xc[y * self.w + x],
                                _ => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let pad = self.padding.amount() as isize;
        let plane = self.h * self.w;
        let cols = self.col_cols();
        for ci in 0..self.in_ch {
            let dxc = &mut dx[ci * plane..(ci + 1) * plane];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let Some(y) = self
                            .padding
                            .source((oy * self.stride + ki) as isize - pad, self.h)
                        else {
                            continue;
                        };
                        for ox in 0..self.wo {
                            if let Some(x) = self
                                .padding
                                .source((ox * self.stride + kj) as isize - pad, self.w)
                            {
                                dxc[y * self.w + x] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let rows = g.col_rows();
    let cols = g.col_cols();
    let in_plane = g.in_ch * g.h * g.w;
    let out_plane = g.out_ch * cols;
    let mut col = vec![T::zero(); rows * cols];
    let mut out = vec![T::zero(); g.batch * out_plane];
    for n in 0..g.batch {
        g.im2col(&x[n * in_plane..(n + 1) * in_plane], &mut col);
        let o = &mut out[n * out_plane..(n + 1) * out_plane];
        matmul(g.out_ch, rows, cols, weight, false, &col, false, o, false);
        if let Some(b) = bias {
            for (k, bk) in b.iter().enumerate() {
                for v in &mut o[k * cols..(k + 1) * cols] {
                    *v += *bk;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let rows = g.col_rows();
    let cols = g.col_cols();
    let in_plane = g.in_ch * g.h * g.w;
    let out_plane = g.out_ch * cols;
    let mut col = vec![T::zero(); rows * cols];
    let mut dcol = vec![T::zero(); rows * cols];
    let mut dx = need_input.then(|| vec![T::zero(); g.batch * in_plane]);
    let mut dw = need_weight.then(|| vec![T::zero(); g.out_ch * rows]);
    let mut db = need_bias.then(|| vec![T::zero(); g.out_ch]);
    for n in 0..g.batch {
        let go = &grad_out[n * out_plane..(n + 1) * out_plane];
        if let Some(dw) = dw.as_mut() {
            g.im2col(&x[n * in_plane..(n + 1) * in_plane], &mut col);
            // dW (K x rows) += gout (K x cols) * col^T
            matmul(g.out_ch, cols, rows, go, false, &col, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            // dcol (rows x cols) = W^T (rows x K) * gout (K x cols)
            matmul(rows, g.out_ch, cols, weight, true, go, false, &mut dcol, false);
            g.col2im(&dcol, &mut dx[n * in_plane..(n + 1) * in_plane]);
        }
        if let Some(db) = db.as_mut() {
            for (k, b) in db.iter_mut().enumerate() {
                *b += go[k * cols..(k + 1) * cols].iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Numerically stable in-place softmax over a row.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnGeom {
    pub batch: usize,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn scale<T: Scalar>(&self) -> T {
        T::one() / T::lit(self.head_dim() as f64).sqrt()
    }

    fn scatter_add<T: Scalar>(&self, src: &[T], n: usize, s: usize, dst: &mut [T]) {
        let dh = self.head_dim();
        for t in 0..self.tokens {
            let off = (n * self.tokens + t) * self.dim + s * dh;
            for (d, v) in dst[off..off + dh].iter_mut().zip(&src[t * dh..(t + 1) * dh]) {
                *d += *v;
            }
        }
    }
}

/// Scaled dot-product attention over interleaved heads.
///
/// `q`, `k`, `v` are `[N, T, D]`; returns the output `[N, T, D]` and the
/// row-stochastic probabilities `[N, S, T, T]`.
pub(crate) fn attention_forward<T: Scalar>(g: &AttnGeom, q: &[T], k: &[T], v: &[T]) -> (Vec<T>, Vec<T>) {
    let (t, dh) = (g.tokens, g.head_dim());
    let scale: T = g.scale();
    let mut out = vec![T::zero(); g.batch * t * g.dim];
    let mut probs = vec![T::zero(); g.batch * g.heads * t * t];
    let mut qh = vec![T::zero(); t * dh];
    let mut kh = vec![T::zero(); t * dh];
    let mut vh = vec![T::zero(); t * dh];
    let mut oh = vec![T::zero(); t * dh];
    for n in 0..g.batch {
        for s in 0..g.heads {
            gather(g, q, n, s, &mut qh);
            gather(g, k, n, s, &mut kh);
            gather(g, v, n, s, &mut vh);
            let p = &mut probs[(n * g.heads + s) * t * t..(n * g.heads + s + 1) * t * t];
            matmul(t, dh, t, &qh, false, &kh, true, p, false);
            for row in p.chunks_mut(t) {
                for x in row.iter_mut() {
                    *x *= scale;
                }
                softmax_row(row);
            }
            matmul(t, t, dh, p, false, &vh, false, &mut oh, false);
            g.scatter_add(&oh, n, s, &mut out);
        }
    }
    (out, probs)
}

pub(crate) fn attention_backward<T: Scalar>(
    g: &AttnGeom,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (t, dh) = (g.tokens, g.head_dim());
    let scale: T = g.scale();
    let len = g.batch * t * g.dim;
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len]);
    let mut qh = vec![T::zero(); t * dh];
    let mut kh = vec![T::zero(); t * dh];
    let mut vh = vec![T::zero(); t * dh];
    let mut goh = vec![T::zero(); t * dh];
    let mut tmp = vec![T::zero(); t * dh];
    let mut dp = vec![T::zero(); t * t];
    for n in 0..g.batch {
        for s in 0..g.heads {
            gather(g, q, n, s, &mut qh);
            gather(g, k, n, s, &mut kh);
            gather(g, v, n, s, &mut vh);
            gather(g, grad_out, n, s, &mut goh);
            let p = &probs[(n * g.heads + s) * t * t..(n * g.heads + s + 1) * t * t];
            // dV = P^T dO
            matmul(t, t, dh, p, true, &goh, false, &mut tmp, false);
            g.scatter_add(&tmp, n, s, &mut dv);
            // dP = dO V^T, then softmax Jacobian
            matmul(t, dh, t, &goh, false, &vh, true, &mut dp, false);
            for (dprow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
                let dot: T = dprow.iter().zip(prow).map(|(a, b)| *a * *b).sum();
                for (d, pv) in dprow.iter_mut().zip(prow) {
                    *d = *pv * (*d - dot) * scale;
                }
            }
            // dQ = dS K, dK = dS^T Q
            matmul(t, t, dh, &dp, false, &kh, false, &mut tmp, false);
            g.scatter_add(&tmp, n, s, &mut dq);
            matmul(t, t, dh, &dp, true, &qh, false, &mut tmp, false);
            g.scatter_add(&tmp, n, s, &mut dk);
        }
    }
    (dq, dk, dv)
}

fn gather<T: Scalar>(g: &AttnGeom, src: &[T], n: usize, s: usize, dst: &mut [T]) {
    let dh = g.head_dim();
    for t in 0..g.tokens {
        let off = (n * g.tokens + t) * g.dim + s * dh;
        dst[t * dh..(t + 1) * dh].copy_from_slice(&src[off..off + dh]);
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer norm over the trailing `dim` values of each row.
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    dim: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / dim;
    let eps = T::lit(LAYER_NORM_EPS);
    let inv_d = T::one() / T::lit(dim as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (xr, yr) in x.chunks(dim).zip(y.chunks_mut(dim)) {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for i in 0..dim {
            yr[i] = (xr[i] - mean) * rstd * gamma[i] + beta[i];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &[T],
    dim: usize,
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_d = T::one() / T::lit(dim as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); dim];
    let mut dbeta = vec![T::zero(); dim];
    let mut xhat = vec![T::zero(); dim];
    let mut dxhat = vec![T::zero(); dim];
    for (r, ((xr, gr), dxr)) in x
        .chunks(dim)
        .zip(grad_out.chunks(dim))
        .zip(dx.chunks_mut(dim))
        .enumerate()
    {
        let (mean, rstd) = (means[r], rstds[r]);
        for i in 0..dim {
            xhat[i] = (xr[i] - mean) * rstd;
            dxhat[i] = gr[i] * gamma[i];
            dgamma[i] += gr[i] * xhat[i];
            dbeta[i] += gr[i];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<T>() * inv_d;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| *a * *b).sum::<T>() * inv_d;
        for i in 0..dim {
            dxr[i] = rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let half = T::lit(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dim_formula() {
        assert_eq!(conv_output_dim(8, 3, 1, 1), Some(8));
        assert_eq!(conv_output_dim(64, 5, 4, 2), Some(16));
        assert_eq!(conv_output_dim(2, 5, 1, 0), None);
        assert_eq!(conv_output_dim(5, 3, 0, 1), None);
    }

    #[test]
    fn softmax_row_is_a_distribution() {
        let mut row = [1000.0f32, 1001.0, 999.0];
        softmax_row(&mut row);
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(row[1] > row[0] && row[0] > row[2]);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
