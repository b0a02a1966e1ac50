use super::kernels::{self, AttnGeom, ConvGeom, Padding};
use super::scalar::{matmul, Scalar};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Reshape(Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    RmsNorm {
        input: Var,
        rms: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<T>,
    },
    GlobalAvgPool(Var),
    AvgPool {
        input: Var,
        factor: usize,
    },
    UpsampleNearest {
        input: Var,
        factor: usize,
    },
    Patchify {
        input: Var,
        patch: usize,
    },
    MapToTokens(Var),
    TokensToMap(Var),
    PrependToken {
        token: Var,
        tokens: Var,
    },
    SliceTokens {
        input: Var,
        start: usize,
        len: usize,
    },
    AddToPatchTokens {
        tokens: Var,
        delta: Var,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run record of one forward pass.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    track_params: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4<T>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape.as_slice() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

fn dims3<T>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape.as_slice() {
        [n, a, b] => Ok((n, a, b)),
        ref s => Err(Error::shape(op, format!("expected [N,T,D], got {s:?}"))),
    }
}

fn same_shape<T>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            track_params: true,
        }
    }

    /// A tape that records parameters as constants; nothing requires grad.
    pub fn no_grad() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input that is not a model parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: usize, value: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Param(id),
            requires_grad: self.track_params,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn zip_map(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, op)?;
        Ok(Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map(a, b, "add", |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map(a, b, "sub", |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map(a, b, "mul", |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * factor);
        self.push("scale", v, Op::Scale(a, factor), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push("square", v, Op::Square(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(kernels::gelu);
        self.push("gelu", v, Op::Gelu(a), &[a])
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data.iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// 2-D convolution. `input` is `[N,C,H,W]`, `kernel` is `[K,C,kh,kw]`
    /// with odd `kh`, `kw`; `bias`, when given, is `[K]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(input), "conv2d")?;
        let (k, kc, kh, kw) = dims4(self.value(kernel), "conv2d")?;
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel must be odd-sized, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {k} kernels", self.shape(b))));
            }
        }
        let pad = padding.amount();
        let (Some(ho), Some(wo)) = (
            kernels::conv_output_dim(h, kh, stride, pad),
            kernels::conv_output_dim(w, kw, stride, pad),
        ) else {
            return Err(Error::shape("conv2d", format!("zero-size output for {h}x{w} input")));
        };
        let geom = ConvGeom {
            batch: n,
            in_ch: c,
            h,
            w,
            out_ch: k,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        };
        let data = kernels::conv2d_forward(
            &geom,
            &self.value(input).data,
            &self.value(kernel).data,
            bias.map(|b| self.value(b).data.as_slice()),
        );
        let value = Tensor {
            shape: vec![n, k, ho, wo],
            data,
        };
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        )
    }

    /// `y = x W^T + b` over the trailing dimension. `weight` is `[out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let [out_f, in_f] = *wt.shape.as_slice() else {
            return Err(Error::shape("linear", format!("weight must be 2-D, got {:?}", wt.shape)));
        };
        if *x.shape.last().expect("non-empty shape") != in_f {
            return Err(Error::shape(
                "linear",
                format!("input {:?} does not end in {in_f}", x.shape),
            ));
        }
        let rows = x.numel() / in_f;
        let mut data = vec![T::zero(); rows * out_f];
        matmul(rows, in_f, out_f, &x.data, false, &wt.data, true, &mut data, false);
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.shape != [out_f] {
                return Err(Error::shape("linear", format!("bias {:?} for {out_f} outputs", bt.shape)));
            }
            for row in data.chunks_mut(out_f) {
                for (v, bv) in row.iter_mut().zip(&bt.data) {
                    *v += *bv;
                }
            }
        }
        let mut shape = x.shape.clone();
        *shape.last_mut().expect("non-empty shape") = out_f;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "linear",
            Tensor { shape, data },
            Op::Linear { input, weight, bias },
            &inputs,
        )
    }

    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let x = self.value(input);
        let dim = *x.shape.last().expect("non-empty shape");
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(Error::shape("layer_norm", format!("affine params must be [{dim}]")));
        }
        let (data, means, rstds) =
            kernels::layer_norm_forward(&x.data, dim, &self.value(gamma).data, &self.value(beta).data);
        let value = Tensor {
            shape: x.shape.clone(),
            data,
        };
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                means,
                rstds,
            },
            &[input, gamma, beta],
        )
    }

    /// Divides each sample (leading index) by its root-mean-square.
    pub fn rms_norm(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let n = x.shape[0];
        let per = x.numel() / n;
        let eps = T::lit(1e-6);
        let mut rms = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(x.numel());
        for chunk in x.data.chunks(per) {
            let ms = chunk.iter().map(|v| *v * *v).sum::<T>() / T::lit(per as f64);
            let r = (ms + eps).sqrt();
            rms.push(r);
            data.extend(chunk.iter().map(|v| *v / r));
        }
        let value = Tensor {
            shape: x.shape.clone(),
            data,
        };
        self.push("rms_norm", value, Op::RmsNorm { input, rms }, &[input])
    }

    /// Multi-head scaled dot-product attention over `[N,T,D]` projections.
    /// Returns the attended values and the probabilities `[N,S,T,T]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Tensor<T>)> {
        let (n, t, d) = dims3(self.value(q), "attention")?;
        same_shape(self.value(q), self.value(k), "attention")?;
        same_shape(self.value(q), self.value(v), "attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "token dim {d} is not divisible by {heads} heads"
            )));
        }
        let geom = AttnGeom {
            batch: n,
            tokens: t,
            dim: d,
            heads,
        };
        let (out, probs) =
            kernels::attention_forward(&geom, &self.value(q).data, &self.value(k).data, &self.value(v).data);
        let probs_t = Tensor {
            shape: vec![n, heads, t, t],
            data: probs.clone(),
        };
        let value = Tensor {
            shape: vec![n, t, d],
            data: out,
        };
        let var = self.push(
            "attention",
            value,
            Op::Attention { q, k, v, geom, probs },
            &[q, k, v],
        )?;
        Ok((var, probs_t))
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(input), "global_avg_pool")?;
        let inv = T::one() / T::lit((h * w) as f64);
        let data = self
            .value(input)
            .data
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor {
            shape: vec![n, c],
            data,
        };
        self.push("global_avg_pool", value, Op::GlobalAvgPool(input), &[input])
    }

    /// Non-overlapping `factor x factor` average pooling.
    pub fn avg_pool(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(input), "avg_pool")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape("avg_pool", format!("{h}x{w} not divisible by {factor}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let x = &self.value(input).data;
        let inv = T::one() / T::lit((factor * factor) as f64);
        let mut data = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    data[(p * oh + y / factor) * ow + xx / factor] += x[(p * h + y) * w + xx] * inv;
                }
            }
        }
        let value = Tensor {
            shape: vec![n, c, oh, ow],
            data,
        };
        self.push("avg_pool", value, Op::AvgPool { input, factor }, &[input])
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(input), "upsample_nearest")?;
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let x = &self.value(input).data;
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    data.push(x[(p * h + y / factor) * w + xx / factor]);
                }
            }
        }
        let value = Tensor {
            shape: vec![n, c, oh, ow],
            data,
        };
        self.push("upsample_nearest", value, Op::UpsampleNearest { input, factor }, &[input])
    }

    /// `[N,C,H,W] -> [N, (H/p)(W/p), C*p*p]`, tokens in raster order.
    pub fn patchify(&mut self, input: Var, patch: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(input), "patchify")?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::shape("patchify", format!("{h}x{w} not divisible by patch {patch}")));
        }
        let (gh, gw) = (h / patch, w / patch);
        let feat = c * patch * patch;
        let x = &self.value(input).data;
        let mut data = vec![T::zero(); n * gh * gw * feat];
        for (src, dst) in patch_index_pairs(n, c, h, w, patch) {
            data[dst] = x[src];
        }
        let value = Tensor {
            shape: vec![n, gh * gw, feat],
            data,
        };
        self.push("patchify", value, Op::Patchify { input, patch }, &[input])
    }

    /// `[N,C,h,w] -> [N, h*w, C]`.
    pub fn map_to_tokens(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(input), "map_to_tokens")?;
        let x = &self.value(input).data;
        let hw = h * w;
        let mut data = vec![T::zero(); n * hw * c];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    data[(b * hw + p) * c + ch] = x[(b * c + ch) * hw + p];
                }
            }
        }
        let value = Tensor {
            shape: vec![n, hw, c],
            data,
        };
        self.push("map_to_tokens", value, Op::MapToTokens(input), &[input])
    }

    /// `[N, h*w, C] -> [N,C,h,w]`.
    pub fn tokens_to_map(&mut self, input: Var, height: usize, width: usize) -> Result<Var> {
        let (n, t, c) = dims3(self.value(input), "tokens_to_map")?;
        if t != height * width {
            return Err(Error::shape(
                "tokens_to_map",
                format!("{t} tokens do not form a {height}x{width} grid"),
            ));
        }
        let x = &self.value(input).data;
        let mut data = vec![T::zero(); n * t * c];
        for b in 0..n {
            for p in 0..t {
                for ch in 0..c {
                    data[(b * c + ch) * t + p] = x[(b * t + p) * c + ch];
                }
            }
        }
        let value = Tensor {
            shape: vec![n, c, height, width],
            data,
        };
        self.push("tokens_to_map", value, Op::TokensToMap(input), &[input])
    }

    /// Prepends a shared `[D]` token to every sequence of `[N,T,D]`.
    pub fn prepend_token(&mut self, token: Var, tokens: Var) -> Result<Var> {
        let (n, t, d) = dims3(self.value(tokens), "prepend_token")?;
        if self.shape(token) != [d] {
            return Err(Error::shape("prepend_token", format!("token must be [{d}]")));
        }
        let tok = &self.value(token).data;
        let x = &self.value(tokens).data;
        let mut data = Vec::with_capacity(n * (t + 1) * d);
        for b in 0..n {
            data.extend_from_slice(tok);
            data.extend_from_slice(&x[b * t * d..(b + 1) * t * d]);
        }
        let value = Tensor {
            shape: vec![n, t + 1, d],
            data,
        };
        self.push("prepend_token", value, Op::PrependToken { token, tokens }, &[token, tokens])
    }

    /// Tokens `start..start+len` of every sequence.
    pub fn slice_tokens(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (n, t, d) = dims3(self.value(input), "slice_tokens")?;
        if len == 0 || start + len > t {
            return Err(Error::shape("slice_tokens", format!("{start}..{} of {t}", start + len)));
        }
        let x = &self.value(input).data;
        let mut data = Vec::with_capacity(n * len * d);
        for b in 0..n {
            data.extend_from_slice(&x[(b * t + start) * d..(b * t + start + len) * d]);
        }
        let value = Tensor {
            shape: vec![n, len, d],
            data,
        };
        self.push("slice_tokens", value, Op::SliceTokens { input, start, len }, &[input])
    }

    /// Adds `delta [N,T,D]` to tokens `1..=T` of `tokens [N,T+1,D]`; token 0
    /// (the class token) is passed through.
    pub fn add_to_patch_tokens(&mut self, tokens: Var, delta: Var) -> Result<Var> {
        let (n, t1, d) = dims3(self.value(tokens), "add_to_patch_tokens")?;
        if self.shape(delta) != [n, t1 - 1, d] {
            return Err(Error::shape(
                "add_to_patch_tokens",
                format!("delta {:?} for tokens {:?}", self.shape(delta), [n, t1, d]),
            ));
        }
        let mut value = self.value(tokens).clone();
        let dl = &self.value(delta).data;
        for b in 0..n {
            let dst = &mut value.data[(b * t1 + 1) * d..(b + 1) * t1 * d];
            for (o, v) in dst.iter_mut().zip(&dl[b * (t1 - 1) * d..(b + 1) * (t1 - 1) * d]) {
                *o += *v;
            }
        }
        self.push(
            "add_to_patch_tokens",
            value,
            Op::AddToPatchTokens { tokens, delta },
            &[tokens, delta],
        )
    }

    /// Mean binary cross-entropy of two-class logits `[N,2]`.
    ///
    /// The manipulated-class probability is `sigmoid(z1 - z0)`; the loss is
    /// evaluated in the stable `max(z,0) - y z + ln(1 + e^-|z|)` form.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape.len() != 2 || t.shape[1] != 2 || t.shape[0] != labels.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} with {} labels", t.shape, labels.len()),
            ));
        }
        for &y in labels {
            if y != T::zero() && y != T::one() {
                return Err(Error::Label(y.as_f64()));
            }
        }
        let n = labels.len();
        let mut total = T::zero();
        for (row, &y) in t.data.chunks(2).zip(labels) {
            let z = row[1] - row[0];
            total += z.max(T::zero()) - y * z + (-z.abs()).exp().ln_1p();
        }
        let loss = total / T::lit(n as f64);
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));
        let Tape { nodes, grads, .. } = self;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if nodes[i].requires_grad {
                backward_node(nodes, grads, i, &g.data);
            }
            grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`; zeros when `v`
    /// did not participate.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        self.grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    /// Accumulated gradients for parameters `0..count`, zero-filled for
    /// parameters that were not used. `shapes` supplies the parameter shapes.
    pub fn param_grads(&self, shapes: &[&[usize]]) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(Some(g)) = self.grads.get(i) {
                    for (o, v) in out[id].data.iter_mut().zip(&g.data) {
                        *o += *v;
                    }
                }
            }
        }
        out
    }
}

/// `(source, destination)` flat indices of the patchify permutation.
fn patch_index_pairs(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    patch: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let (gh, gw) = (h / patch, w / patch);
    let feat = c * patch * patch;
    let tokens = gh * gw;
    (0..n).flat_map(move |b| {
        (0..c).flat_map(move |ch| {
            (0..h).flat_map(move |y| {
                (0..w).map(move |x| {
                    let src = ((b * c + ch) * h + y) * w + x;
                    let tok = (y / patch) * gw + x / patch;
                    let f = (ch * patch + y % patch) * patch + x % patch;
                    (src, (b * tokens + tok) * feat + f)
                })
            })
        })
    })
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => {
            *slot = Some(Tensor {
                shape: nodes[v.0].value.shape.clone(),
                data: g,
            });
        }
    }
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], i: usize, g: &[T]) {
    let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
    let needs = |v: Var| nodes[v.0].requires_grad;
    let mut acc = |v: Var, d: Vec<T>| accumulate(nodes, grads, v, d);
    match &nodes[i].op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) => {
            acc(*a, g.to_vec());
            acc(*b, g.to_vec());
        }
        Op::Sub(a, b) => {
            acc(*a, g.to_vec());
            acc(*b, g.iter().map(|x| -*x).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if needs(*a) {
                acc(*a, g.iter().zip(&vb.data).map(|(x, y)| *x * *y).collect());
            }
            if needs(*b) {
                acc(*b, g.iter().zip(&va.data).map(|(x, y)| *x * *y).collect());
            }
        }
        Op::Scale(a, f) => acc(*a, g.iter().map(|x| *x * *f).collect()),
        Op::Square(a) => {
            let two = T::lit(2.0);
            acc(*a, g.iter().zip(&val(*a).data).map(|(x, y)| *x * two * *y).collect());
        }
        Op::Relu(a) => acc(
            *a,
            g.iter()
                .zip(&val(*a).data)
                .map(|(x, y)| if *y > T::zero() { *x } else { T::zero() })
                .collect(),
        ),
        Op::Gelu(a) => acc(
            *a,
            g.iter()
                .zip(&val(*a).data)
                .map(|(x, y)| *x * kernels::gelu_grad(*y))
                .collect(),
        ),
        Op::Reshape(a) => acc(*a, g.to_vec()),
        Op::Sum(a) => acc(*a, vec![g[0]; val(*a).numel()]),
        Op::Mean(a) => {
            let n = val(*a).numel();
            acc(*a, vec![g[0] / T::lit(n as f64); n]);
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        } => {
            let r = kernels::conv2d_backward(
                geom,
                &val(*input).data,
                &val(*kernel).data,
                g,
                needs(*input),
                needs(*kernel),
                bias.is_some_and(needs),
            );
            if let Some(d) = r.input {
                acc(*input, d);
            }
            if let Some(d) = r.weight {
                acc(*kernel, d);
            }
            if let (Some(b), Some(d)) = (bias, r.bias) {
                acc(*b, d);
            }
        }
        Op::Linear { input, weight, bias } => {
            let x = val(*input);
            let wt = val(*weight);
            let (out_f, in_f) = (wt.shape[0], wt.shape[1]);
            let rows = x.numel() / in_f;
            if needs(*input) {
                let mut dx = vec![T::zero(); rows * in_f];
                matmul(rows, out_f, in_f, g, false, &wt.data, false, &mut dx, false);
                acc(*input, dx);
            }
            if needs(*weight) {
                let mut dw = vec![T::zero(); out_f * in_f];
                matmul(out_f, rows, in_f, g, true, &x.data, false, &mut dw, false);
                acc(*weight, dw);
            }
            if let Some(b) = bias {
                if needs(*b) {
                    let mut db = vec![T::zero(); out_f];
                    for row in g.chunks(out_f) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                    acc(*b, db);
                }
            }
        }
        Op::LayerNorm {
            input,
            gamma,
            beta,
            means,
            rstds,
        } => {
            let x = val(*input);
            let dim = *x.shape.last().expect("non-empty shape");
            let (dx, dg, db) = kernels::layer_norm_backward(&x.data, dim, &val(*gamma).data, means, rstds, g);
            acc(*input, dx);
            acc(*gamma, dg);
            acc(*beta, db);
        }
        Op::RmsNorm { input, rms } => {
            let y = &nodes[i].value.data;
            let per = y.len() / rms.len();
            let inv = T::one() / T::lit(per as f64);
            let mut dx = Vec::with_capacity(y.len());
            for ((yc, gc), r) in y.chunks(per).zip(g.chunks(per)).zip(rms) {
                let dot = yc.iter().zip(gc).map(|(a, b)| *a * *b).sum::<T>() * inv;
                dx.extend(yc.iter().zip(gc).map(|(yv, gv)| (*gv - *yv * dot) / *r));
            }
            acc(*input, dx);
        }
        Op::Attention { q, k, v, geom, probs } => {
            let (dq, dk, dv) =
                kernels::attention_backward(geom, &val(*q).data, &val(*k).data, &val(*v).data, probs, g);
            acc(*q, dq);
            acc(*k, dk);
            acc(*v, dv);
        }
        Op::GlobalAvgPool(a) => {
            let x = val(*a);
            let hw = x.shape[2] * x.shape[3];
            let inv = T::one() / T::lit(hw as f64);
            let mut dx = Vec::with_capacity(x.numel());
            for gv in g {
                dx.extend(std::iter::repeat_n(*gv * inv, hw));
            }
            acc(*a, dx);
        }
        Op::AvgPool { input, factor } => {
            let x = val(*input);
            let (h, w) = (x.shape[2], x.shape[3]);
            let (oh, ow) = (h / factor, w / factor);
            let inv = T::one() / T::lit((factor * factor) as f64);
            let planes = x.shape[0] * x.shape[1];
            let mut dx = Vec::with_capacity(x.numel());
            for p in 0..planes {
                for y in 0..h {
                    for xx in 0..w {
                        dx.push(g[(p * oh + y / factor) * ow + xx / factor] * inv);
                    }
                }
            }
            acc(*input, dx);
        }
        Op::UpsampleNearest { input, factor } => {
            let x = val(*input);
            let (h, w) = (x.shape[2], x.shape[3]);
            let (oh, ow) = (h * factor, w * factor);
            let planes = x.shape[0] * x.shape[1];
            let mut dx = vec![T::zero(); x.numel()];
            for p in 0..planes {
                for y in 0..oh {
                    for xx in 0..ow {
                        dx[(p * h + y / factor) * w + xx / factor] += g[(p * oh + y) * ow + xx];
                    }
                }
            }
            acc(*input, dx);
        }
        Op::Patchify { input, patch } => {
            let x = val(*input);
            let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let mut dx = vec![T::zero(); x.numel()];
            for (src, dst) in patch_index_pairs(n, c, h, w, *patch) {
                dx[src] = g[dst];
            }
            acc(*input, dx);
        }
        Op::MapToTokens(a) => {
            let x = val(*a);
            let (n, c) = (x.shape[0], x.shape[1]);
            let hw = x.shape[2] * x.shape[3];
            let mut dx = vec![T::zero(); x.numel()];
            for b in 0..n {
                for ch in 0..c {
                    for p in 0..hw {
                        dx[(b * c + ch) * hw + p] = g[(b * hw + p) * c + ch];
                    }
                }
            }
            acc(*a, dx);
        }
        Op::TokensToMap(input) => {
            let x = val(*input);
            let (n, t, c) = (x.shape[0], x.shape[1], x.shape[2]);
            let mut dx = vec![T::zero(); x.numel()];
            for b in 0..n {
                for p in 0..t {
                    for ch in 0..c {
                        dx[(b * t + p) * c + ch] = g[(b * c + ch) * t + p];
                    }
                }
            }
            acc(*input, dx);
        }
        Op::PrependToken { token, tokens } => {
            let x = val(*tokens);
            let (n, t, d) = (x.shape[0], x.shape[1], x.shape[2]);
            if needs(*token) {
                let mut dt = vec![T::zero(); d];
                for b in 0..n {
                    for (o, v) in dt.iter_mut().zip(&g[b * (t + 1) * d..(b * (t + 1) + 1) * d]) {
                        *o += *v;
                    }
                }
                acc(*token, dt);
            }
            if needs(*tokens) {
                let mut dx = Vec::with_capacity(x.numel());
                for b in 0..n {
                    dx.extend_from_slice(&g[(b * (t + 1) + 1) * d..(b + 1) * (t + 1) * d]);
                }
                acc(*tokens, dx);
            }
        }
        Op::SliceTokens { input, start, len } => {
            let x = val(*input);
            let (n, t, d) = (x.shape[0], x.shape[1], x.shape[2]);
            let mut dx = vec![T::zero(); x.numel()];
            for b in 0..n {
                dx[(b * t + start) * d..(b * t + start + len) * d]
                    .copy_from_slice(&g[b * len * d..(b + 1) * len * d]);
            }
            acc(*input, dx);
        }
        Op::AddToPatchTokens { tokens, delta } => {
            let x = val(*tokens);
            let (n, t1, d) = (x.shape[0], x.shape[1], x.shape[2]);
            acc(*tokens, g.to_vec());
            if needs(*delta) {
                let mut dd = Vec::with_capacity(n * (t1 - 1) * d);
                for b in 0..n {
                    dd.extend_from_slice(&g[(b * t1 + 1) * d..(b + 1) * t1 * d]);
                }
                acc(*delta, dd);
            }
        }
        Op::BceWithLogits { logits, labels } => {
            let x = val(*logits);
            let scale = g[0] / T::lit(labels.len() as f64);
            let mut dx = Vec::with_capacity(x.numel());
            for (row, &y) in x.data.chunks(2).zip(labels) {
                let dz = (sigmoid(row[1] - row[0]) - y) * scale;
                dx.push(-dz);
                dx.push(dz);
            }
            acc(*logits, dx);
        }
    }
}

/// Logistic function, stable for large magnitudes.
pub fn logistic<T: Scalar>(z: T) -> T {
    sigmoid(z)
}
