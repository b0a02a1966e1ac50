//! Building blocks of the dual-branch network.

use rand::Rng;

use super::config::{CablStructure, ModelConfig};
use crate::error::{Error, Result};
use crate::imgproc::{edge_filter, EdgeOperator};
use crate::tensor::nn::{Conv2d, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::tensor::{Padding, Scalar, Tape, Tensor, Var};

/// Strided convolution for the conv branch plus linear patch embedding and
/// a learned class token for the transformer branch.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Conv2d,
    pub patch_embed: Linear,
    pub class_token: ParamId,
    pub patch: usize,
}

impl Stem {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let half = cfg.stem_stride / 2;
        let conv = Conv2d::new(
            store,
            "stem.conv",
            3,
            cfg.channels,
            2 * half + 1,
            cfg.stem_stride,
            Padding::Zero(half),
            rng,
        );
        let p = cfg.patch_size;
        let patch_embed = Linear::new(store, "stem.patch", 3 * p * p, cfg.token_dim, true, rng);
        let class_token = store.add("stem.class_token", Tensor::normal(&[cfg.token_dim], 0.02, rng));
        Self {
            conv,
            patch_embed,
            class_token,
            patch: p,
        }
    }

    /// `[N,3,H,W]` → (conv features `[N,C,H/s,W/s]`, tokens `[N,1+HW/p²,D]`).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || !shape[2].is_multiple_of(self.patch) || !shape[3].is_multiple_of(self.patch) {
            return Err(Error::shape(
                "stem",
                format!("input {shape:?} does not tile into {p}x{p} patches", p = self.patch),
            ));
        }
        let feat = self.conv.forward(tape, store, x)?;
        let patches = tape.patchify(x, self.patch)?;
        let emb = self.patch_embed.forward(tape, store, patches)?;
        let cls = store.var(tape, self.class_token);
        let tokens = tape.prepend_token(cls, emb)?;
        Ok((feat, tokens))
    }
}

/// Two 3×3 conv layers with ReLU.
#[derive(Clone, Debug)]
pub struct ConvLayers {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl ConvLayers {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, ch: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: Conv2d::new(store, &format!("{name}.conv1"), ch, ch, 3, 1, Padding::same_zero(3), rng),
            second: Conv2d::new(store, &format!("{name}.conv2"), ch, ch, 3, 1, Padding::same_zero(3), rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let h = self.second.forward(tape, store, h)?;
        tape.relu(h)
    }
}

/// Result of one conv-branch block.
pub struct BlockOutput<T: Scalar> {
    /// Block output `F_i`.
    pub out: Var,
    /// `C(F_{i-1})`, the conv-layer response.
    pub conv: Var,
    /// `S(F_{i-1})`, present for boundary-aware blocks.
    pub edge: Option<Tensor<T>>,
}

/// Conv-branch block; with an edge operator it becomes the boundary-aware
/// variant. The edge map is a fixed function of the input and is recorded
/// as a constant, so gradients reach the input only through the conv layers.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub layers: ConvLayers,
    pub edge: Option<(EdgeOperator, CablStructure)>,
}

impl ConvBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        ch: usize,
        edge: Option<(EdgeOperator, CablStructure)>,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            layers: ConvLayers::new(store, name, ch, rng),
            edge,
        }
    }

    /// `frozen_edge` replaces the computed edge map (used to evaluate the
    /// block with the edge held fixed).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        frozen_edge: Option<&Tensor<T>>,
    ) -> Result<BlockOutput<T>> {
        let Some((op, structure)) = self.edge else {
            let conv = self.layers.forward(tape, store, x)?;
            return Ok(BlockOutput {
                out: conv,
                conv,
                edge: None,
            });
        };
        let edge = match frozen_edge {
            Some(e) => e.clone(),
            None => edge_filter(tape.value(x), op)?,
        };
        let s = tape.constant(edge.clone());
        let (out, conv) = match structure {
            CablStructure::MultiplyResidual => {
                let conv = self.layers.forward(tape, store, x)?;
                let gated = tape.mul(s, conv)?;
                (tape.add(gated, conv)?, conv)
            }
            CablStructure::Additive => {
                let conv = self.layers.forward(tape, store, x)?;
                (tape.add(conv, s)?, conv)
            }
            CablStructure::GatedInput => {
                let gated = tape.mul(s, x)?;
                let conv = self.layers.forward(tape, store, gated)?;
                (conv, conv)
            }
        };
        Ok(BlockOutput {
            out,
            conv,
            edge: Some(edge),
        })
    }
}

pub struct TransOutput<T: Scalar> {
    pub tokens: Var,
    pub attn: Tensor<T>,
    pub queries: Tensor<T>,
    pub keys: Tensor<T>,
}

/// Pre-norm transformer block with a GELU MLP.
#[derive(Clone, Debug)]
pub struct TransBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * mlp_ratio, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * mlp_ratio, dim, true, rng),
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<TransOutput<T>> {
        let h = self.norm1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h)?;
        let x = tape.add(x, a.out)?;
        let h = self.norm2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, store, h)?;
        let tokens = tape.add(x, h)?;
        Ok(TransOutput {
            tokens,
            attn: a.attn,
            queries: a.queries,
            keys: a.keys,
        })
    }
}

/// Bidirectional coupling between conv features and patch tokens. Both
/// projections are bias-free, so a zero source leaves the target untouched.
#[derive(Clone, Debug)]
pub struct Fcu {
    pub down: Linear,
    pub up: Linear,
    pub factor: usize,
}

impl Fcu {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        dim: usize,
        factor: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            down: Linear::new(store, &format!("{name}.down"), channels, dim, false, rng),
            up: Linear::new(store, &format!("{name}.up"), dim, channels, false, rng),
            factor,
        }
    }

    fn grid<T: Scalar>(&self, tape: &Tape<T>, conv: Var, tokens: Var) -> Result<(usize, usize)> {
        let cs = tape.shape(conv);
        let ts = tape.shape(tokens);
        let (gh, gw) = (cs[2] / self.factor, cs[3] / self.factor);
        if !cs[2].is_multiple_of(self.factor) || !cs[3].is_multiple_of(self.factor) || ts[1] != gh * gw + 1 || cs[0] != ts[0] {
            return Err(Error::shape(
                "fcu",
                format!("conv {cs:?} with pool {} does not match tokens {ts:?}", self.factor),
            ));
        }
        Ok((gh, gw))
    }

    /// Pool conv features to the patch grid, project and add to patch tokens.
    pub fn conv_to_tokens<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        conv: Var,
        tokens: Var,
    ) -> Result<Var> {
        self.grid(tape, conv, tokens)?;
        let pooled = tape.avg_pool(conv, self.factor)?;
        let seq = tape.map_to_tokens(pooled)?;
        let delta = self.down.forward(tape, store, seq)?;
        tape.add_to_patch_tokens(tokens, delta)
    }

    /// Project patch tokens, upsample to the conv grid and add to `conv`.
    pub fn tokens_to_conv<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
        conv: Var,
    ) -> Result<Var> {
        let (gh, gw) = self.grid(tape, conv, tokens)?;
        let patches = tape.slice_tokens(tokens, 1, gh * gw)?;
        let proj = self.up.forward(tape, store, patches)?;
        let map = tape.tokens_to_map(proj, gh, gw)?;
        let up = tape.upsample_nearest(map, self.factor)?;
        tape.add(conv, up)
    }

    /// Simultaneous exchange; each direction reads the un-updated input.
    pub fn exchange<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        conv: Var,
        tokens: Var,
    ) -> Result<(Var, Var)> {
        let new_tokens = self.conv_to_tokens(tape, store, conv, tokens)?;
        let new_conv = self.tokens_to_conv(tape, store, tokens, conv)?;
        Ok((new_conv, new_tokens))
    }
}
