//! Dual-branch classifier: a conv branch with boundary-aware blocks and a
//! transformer branch, coupled after every block, with one head per branch.

mod blocks;
mod checkpoint;
mod config;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::nn::{LayerNorm, Linear, ParamStore};
use crate::tensor::{logistic, Scalar, Tape, Tensor, Var};

pub use blocks::{BlockOutput, ConvBlock, ConvLayers, Fcu, Stem, TransBlock, TransOutput};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{CablStructure, ModelConfig};
pub use train::{accuracy, augment_rescale, batch_tensor, train_epoch, EpochStats, Example, LrSchedule, TrainOptions};

/// Everything a forward pass exposes to the heads, the loss and the CAM engine.
pub struct BranchOutputs<T: Scalar> {
    /// `F_1..F_L`.
    pub conv_features: Vec<Var>,
    /// `F_i` scaled to unit RMS per sample; what the coupling unit and the
    /// conv head read.
    pub normed_features: Vec<Var>,
    /// Conv-layer response of every block.
    pub conv_parts: Vec<Var>,
    /// Edge map of every boundary-aware block.
    pub edges: Vec<Option<Tensor<T>>>,
    /// Token sequence after every transformer block.
    pub tokens: Vec<Var>,
    /// Projected queries / keys `[N,T,D]` of every transformer block.
    pub queries: Vec<Tensor<T>>,
    pub keys: Vec<Tensor<T>>,
    pub attention: Vec<Tensor<T>>,
    /// Final tokens after the output layer norm.
    pub normed_tokens: Var,
    pub conv_logits: Var,
    pub trans_logits: Var,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub stem: Stem,
    pub blocks: Vec<ConvBlock>,
    pub trans: Vec<TransBlock>,
    pub fcus: Vec<Fcu>,
    pub final_norm: LayerNorm,
    pub conv_head: Linear,
    pub trans_head: Linear,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.channels;
        let d = config.token_dim;
        let stem = Stem::new(&mut params, &config, &mut rng);
        let mut blocks = Vec::new();
        let mut trans = Vec::new();
        let mut fcus = Vec::new();
        for i in 0..config.num_blocks {
            let edge = config
                .is_cabl(i)
                .then_some((config.edge_operator, config.cabl_structure));
            blocks.push(ConvBlock::new(&mut params, &format!("block{i}.conv"), c, edge, &mut rng));
            fcus.push(Fcu::new(&mut params, &format!("block{i}.fcu"), c, d, config.pool_factor(), &mut rng));
            trans.push(TransBlock::new(
                &mut params,
                &format!("block{i}.trans"),
                d,
                config.heads,
                config.mlp_ratio,
                &mut rng,
            )?);
        }
        let final_norm = LayerNorm::new(&mut params, "head.norm", d);
        let conv_head = Linear::opposed_pair(&mut params, "head.conv", c, &mut rng);
        let trans_head = Linear::opposed_pair(&mut params, "head.trans", d, &mut rng);
        Ok(Self {
            config,
            params,
            stem,
            blocks,
            trans,
            fcus,
            final_norm,
            conv_head,
            trans_head,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            blocks: self.blocks.clone(),
            trans: self.trans.clone(),
            fcus: self.fcus.clone(),
            final_norm: self.final_norm.clone(),
            conv_head: self.conv_head.clone(),
            trans_head: self.trans_head.clone(),
        }
    }

    /// Forward pass over `[N,3,H,W]`. `frozen_edges`, when given, supplies
    /// the edge map of each boundary-aware block instead of computing it.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, frozen_edges: Option<&[Option<Tensor<T>>]>) -> Result<BranchOutputs<T>> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape("model", format!("expected [N,3,H,W], got {shape:?}")));
        }
        if shape[2] != shape[3] {
            return Err(Error::shape("model", format!("input must be square, got {shape:?}")));
        }
        self.config.check_input(shape[2])?;
        let p = &self.params;
        let (mut feat, mut tokens) = self.stem.forward(tape, p, x)?;
        let grid = (shape[2] / self.config.patch_size, shape[3] / self.config.patch_size);
        let l = self.blocks.len();
        let mut out = BranchOutputs {
            conv_features: Vec::with_capacity(l),
            normed_features: Vec::with_capacity(l),
            conv_parts: Vec::with_capacity(l),
            edges: Vec::with_capacity(l),
            tokens: Vec::with_capacity(l),
            queries: Vec::with_capacity(l),
            keys: Vec::with_capacity(l),
            attention: Vec::with_capacity(l),
            normed_tokens: tokens,
            conv_logits: tokens,
            trans_logits: tokens,
            grid,
        };
        for i in 0..l {
            let frozen = frozen_edges.and_then(|e| e.get(i)).and_then(Option::as_ref);
            let block = self.blocks[i].forward(tape, p, feat, frozen)?;
            let normed = tape.rms_norm(block.out)?;
            tokens = self.fcus[i].conv_to_tokens(tape, p, normed, tokens)?;
            let t = self.trans[i].forward(tape, p, tokens)?;
            tokens = t.tokens;
            feat = self.fcus[i].tokens_to_conv(tape, p, tokens, normed)?;
            out.normed_features.push(normed);

            out.conv_features.push(block.out);
            out.conv_parts.push(block.conv);
            out.edges.push(block.edge);
            out.tokens.push(tokens);
            out.queries.push(t.queries);
            out.keys.push(t.keys);
            out.attention.push(t.attn);
        }
        let last = *out.normed_features.last().expect("at least one block");
        let pooled = tape.global_avg_pool(last)?;
        out.conv_logits = self.conv_head.forward(tape, p, pooled)?;

        let normed = self.final_norm.forward(tape, p, tokens)?;
        let cls = tape.slice_tokens(normed, 0, 1)?;
        let logits = self.trans_head.forward(tape, p, cls)?;
        out.trans_logits = tape.reshape(logits, &[shape[0], 2])?;
        out.normed_tokens = normed;
        Ok(out)
    }

    /// Inference-only forward on a fresh tape.
    pub fn run(&self, input: Tensor<T>) -> Result<(Tape<T>, BranchOutputs<T>)> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(input);
        let out = self.forward(&mut tape, x, None)?;
        Ok((tape, out))
    }

    /// Per-image manipulated score for a batch.
    pub fn predict(&self, input: Tensor<T>) -> Result<Vec<f64>> {
        let (tape, out) = self.run(input)?;
        Ok(image_scores(tape.value(out.conv_logits), tape.value(out.trans_logits)))
    }
}

/// Softmax probability of the manipulated class for each row of `[N,2]`.
pub fn manipulated_probs<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    logits
        .data()
        .chunks(2)
        .map(|r| logistic(r[1].as_f64() - r[0].as_f64()))
        .collect()
}

/// Image score: mean of the two branches' manipulated probabilities.
pub fn image_scores<T: Scalar>(conv_logits: &Tensor<T>, trans_logits: &Tensor<T>) -> Vec<f64> {
    manipulated_probs(conv_logits)
        .into_iter()
        .zip(manipulated_probs(trans_logits))
        .map(|(a, b)| 0.5 * (a + b))
        .collect()
}

/// Unweighted sum of the two branch losses.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, conv_logits: Var, trans_logits: Var, labels: &[T]) -> Result<Var> {
    let a = tape.bce_with_logits(conv_logits, labels)?;
    let b = tape.bce_with_logits(trans_logits, labels)?;
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            num_blocks: 2,
            channels: 4,
            token_dim: 8,
            heads: 2,
            cabl_depth: 2,
            ..ModelConfig::default()
        }
    }

    fn rand_input(n: usize, size: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 3, size, size], |_| rng.random_range(-0.5..0.5))
    }

    #[test]
    fn stem_token_count_and_bias() {
        let m = Model::<f64>::new(ModelConfig::default(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let (feat, tokens) = m.stem.forward(&mut tape, &m.params, x).unwrap();
        assert_eq!(tape.shape(tokens), &[1, 65, 64]);
        assert_eq!(tape.shape(feat), &[1, 16, 16, 16]);
        assert!(tape.value(feat).data().iter().all(|&v| v == 0.0));
        let cls = m.params.get(m.stem.class_token).data().to_vec();
        let tv = tape.value(tokens).data();
        assert_eq!(&tv[..64], &cls[..]);
        let bias = m.params.get(m.stem.patch_embed.bias.unwrap()).data();
        assert!(tv[64..].chunks(64).all(|t| t == bias));
    }

    #[test]
    fn stem_shapes_at_all_scales() {
        let m = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
        for s in [64, 96, 128] {
            let (tape, out) = m.run(Tensor::zeros(&[1, 3, s, s])).unwrap();
            let g = s / 8;
            assert_eq!(out.grid, (g, g));
            assert_eq!(tape.shape(out.normed_tokens), &[1, g * g + 1, 64]);
            assert_eq!(tape.shape(out.conv_logits), &[1, 2]);
            assert_eq!(out.queries.len(), 6);
        }
        assert!(m.run(Tensor::zeros(&[1, 3, 60, 60])).is_err());
    }

    #[test]
    fn cabl_edge_identities() {
        let m = Model::<f64>::new(tiny(), 3).unwrap();
        let block = &m.blocks[0];
        let x = rand_input(1, 4, 5).reshape(&[1, 3, 4, 4]).unwrap();
        let x = Tensor::from_fn(&[1, 4, 4, 4], |i| x.data()[i % 48] + 0.1 * (i / 48) as f64);
        for (fill, factor) in [(0.0, 1.0), (1.0, 2.0)] {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let e = Tensor::full(&[1, 4, 4, 4], fill);
            let o = block.forward(&mut tape, &m.params, xv, Some(&e)).unwrap();
            let c = tape.value(o.conv).map(|v| v * factor);
            assert!(tape.value(o.out).max_abs_diff(&c) < 1e-12);
        }
    }

    #[test]
    fn fcu_zero_inputs() {
        let m = Model::<f64>::new(tiny(), 4).unwrap();
        let fcu = &m.fcus[0];
        let mut tape = Tape::new();
        let conv0 = tape.constant(Tensor::zeros(&[2, 4, 4, 4]));
        let toks = tape.constant(Tensor::from_fn(&[2, 5, 8], |i| i as f64 * 0.1));
        let (_, t2) = fcu.exchange(&mut tape, &m.params, conv0, toks).unwrap();
        assert_eq!(tape.value(t2), tape.value(toks));

        let conv = tape.constant(Tensor::from_fn(&[2, 4, 4, 4], |i| (i % 7) as f64));
        let tok0 = tape.constant(Tensor::zeros(&[2, 5, 8]));
        let (c2, _) = fcu.exchange(&mut tape, &m.params, conv, tok0).unwrap();
        assert_eq!(tape.value(c2), tape.value(conv));

        let bad = tape.constant(Tensor::zeros(&[2, 6, 8]));
        assert!(fcu.exchange(&mut tape, &m.params, conv, bad).is_err());
    }

    #[test]
    fn fcu_identity_round_trip_on_constants() {
        let cfg = ModelConfig {
            channels: 8,
            ..tiny()
        };
        let mut m = Model::<f64>::new(cfg, 4).unwrap();
        let eye = Tensor::from_fn(&[8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        let (down, up) = (m.fcus[0].down.weight, m.fcus[0].up.weight);
        m.params.set(down, eye.clone()).unwrap();
        m.params.set(up, eye).unwrap();
        let mut tape = Tape::new();
        let conv = tape.constant(Tensor::full(&[1, 8, 4, 4], 2.5));
        let toks = tape.constant(Tensor::zeros(&[1, 5, 8]));
        let (c2, t2) = m.fcus[0].exchange(&mut tape, &m.params, conv, toks).unwrap();
        assert!(tape.value(t2).data()[8..].iter().all(|&v| v == 2.5));
        assert!(tape.value(t2).data()[..8].iter().all(|&v| v == 0.0));
        assert!(tape.value(c2).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let m = Model::<f64>::new(tiny(), 2).unwrap();
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::from_fn(&[1, 5, 8], |i| (i % 8) as f64));
        let o = m.trans[0].forward(&mut tape, &m.params, t).unwrap();
        assert!(o.attn.data().iter().all(|&p| (p - 0.2).abs() < 1e-12));
    }

    #[test]
    fn scores_and_loss() {
        let eq = Tensor::<f64>::new(vec![1, 2], vec![0.3, 0.3]).unwrap();
        assert_eq!(image_scores(&eq, &eq), vec![0.5]);
        let yes = Tensor::<f64>::new(vec![1, 2], vec![-50.0, 50.0]).unwrap();
        let no = Tensor::<f64>::new(vec![1, 2], vec![50.0, -50.0]).unwrap();
        assert!((image_scores(&yes, &no)[0] - 0.5).abs() < 1e-12);

        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]));
        let b = tape.leaf(Tensor::zeros(&[2, 2]));
        let l = total_loss(&mut tape, a, b, &[0.0, 1.0]).unwrap();
        assert!((tape.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-12);

        let mut tape = Tape::<f64>::new();
        let good = Tensor::new(vec![2, 2], vec![20.0, -20.0, -20.0, 20.0]).unwrap();
        let a = tape.leaf(good.clone());
        let b = tape.leaf(good);
        let l = total_loss(&mut tape, a, b, &[0.0, 1.0]).unwrap();
        assert!(tape.value(l).item() < 1e-5);
    }

    #[test]
    fn misclassified_sample_sends_gradient_to_both_branches() {
        let m = Model::<f64>::new(tiny(), 9).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rand_input(1, 16, 1));
        let out = m.forward(&mut tape, x, None).unwrap();
        let probs = image_scores(tape.value(out.conv_logits), tape.value(out.trans_logits));
        let label = if probs[0] >= 0.5 { 0.0 } else { 1.0 };
        let loss = total_loss(&mut tape, out.conv_logits, out.trans_logits, &[label]).unwrap();
        tape.backward(loss).unwrap();
        let grads = m.params.grads(&tape);
        let norm = |name: &str| {
            let id = m.params.find(name).unwrap();
            grads[id.0].data().iter().map(|v| v * v).sum::<f64>()
        };
        assert!(norm("head.conv.weight") > 0.0);
        assert!(norm("head.trans.weight") > 0.0);
        assert!(norm("block0.conv.conv1.weight") > 0.0);
        assert!(norm("block0.trans.attn.q.weight") > 0.0);
    }

    #[test]
    fn score_in_unit_interval() {
        let m = Model::<f32>::new(ModelConfig::default(), 11).unwrap();
        let s = m.predict(rand_input(3, 64, 2).cast()).unwrap();
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
