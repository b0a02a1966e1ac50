//! Parameter storage and the small set of layers the model is built from.

use rand::Rng;

use super::{Padding, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn shapes(&self) -> Vec<&[usize]> {
        self.values.iter().map(|t| t.shape()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(
                "param_set",
                format!("{}: {:?} vs {:?}", self.names[id.0], value.shape(), self.values[id.0].shape()),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Records the parameter on the tape.
    pub fn var(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.param(id.0, &self.values[id.0])
    }

    pub fn grads(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        tape.param_grads(&self.shapes())
    }
}

/// Convolution with bias, He-uniform initialized.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::he_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.var(tape, self.weight);
        let b = store.var(tape, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Fully connected layer over the trailing dimension.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Scaled-normal init, `std = 1 / sqrt(in_features)`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_f: usize,
        out_f: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let std = 1.0 / (in_f as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::normal(&[out_f, in_f], std, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_f])));
        Self { weight, bias }
    }

    /// Two-output layer whose rows start as exact negatives of each other
    /// with zero bias. Softmax gradients keep them opposed through training.
    pub fn opposed_pair<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_f: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (in_f as f64).sqrt();
        let row: Tensor<T> = Tensor::normal(&[in_f], std, rng);
        let mut data: Vec<T> = row.data().iter().map(|&v| -v).collect();
        data.extend_from_slice(row.data());
        let weight = store.add(format!("{name}.weight"), Tensor::new(vec![2, in_f], data).expect("2 x in_f buffer"));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[2])));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.var(tape, self.weight);
        let b = self.bias.map(|b| store.var(tape, b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = store.var(tape, self.gamma);
        let b = store.var(tape, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Result of [`MultiHeadAttention::forward`]. `queries`/`keys` are the
/// projected `[N,T,D]` operands, kept for attention-map reconstruction.
pub struct AttentionOutput<T: Scalar> {
    pub out: Var,
    pub attn: Tensor<T>,
    pub queries: Tensor<T>,
    pub keys: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "token dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng),
            heads,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
    ) -> Result<AttentionOutput<T>> {
        let q = self.query.forward(tape, store, tokens)?;
        let k = self.key.forward(tape, store, tokens)?;
        let v = self.value.forward(tape, store, tokens)?;
        let (attended, attn) = tape.attention(q, k, v, self.heads)?;
        let out = self.proj.forward(tape, store, attended)?;
        Ok(AttentionOutput {
            out,
            attn,
            queries: tape.value(q).clone(),
            keys: tape.value(k).clone(),
        })
    }
}
