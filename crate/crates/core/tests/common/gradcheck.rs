//! Central finite-difference oracle and a family of small random graphs.

use floc_core::tensor::{Padding, Tape, Tensor, Var};
use floc_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct MicroGraph {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Builder,
}

/// `||a - b|| / max(||a||, ||b||)` over the flattened gradients.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

fn eval(build: &Builder, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("graph builds");
    tape.value(out).item()
}

/// Autodiff gradients of every input, then the same by central differences.
pub fn grads(build: &Builder, inputs: &[Tensor<f64>], h: f64) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("graph builds");
    tape.backward(out).expect("backward");
    let auto: Vec<f64> = vars.iter().flat_map(|&v| tape.grad(v).into_data()).collect();

    let mut fd = Vec::with_capacity(auto.len());
    let mut work = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(build, &work);
            work[i].data_mut()[j] = orig - h;
            let minus = eval(build, &work);
            work[i].data_mut()[j] = orig;
            fd.push((plus - minus) / (2.0 * h));
        }
    }
    (auto, fd)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks stay outside the FD stencil.
fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Weighted sum against fixed random coefficients, so every output element
/// gets a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(rand_t(&mut rng, tape.shape(x)));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

/// Twenty graphs covering every differentiable op, all inputs ≤ 64 elements.
pub fn micro_graphs(seed: u64) -> Vec<MicroGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g: Vec<MicroGraph> = Vec::new();
    let mut push = |name, inputs, build: Builder| g.push(MicroGraph { name, inputs, build });

    push(
        "elementwise",
        vec![rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[3, 4])],
        Box::new(|t, v| {
            let ab = t.mul(v[0], v[1])?;
            let s = t.add(ab, v[2])?;
            let d = t.sub(s, v[0])?;
            let q = t.square(d)?;
            let q = t.scale(q, 0.7)?;
            t.sum(q)
        }),
    );
    push(
        "relu_gelu_mean",
        vec![rand_off_zero(&mut rng, &[2, 5]), rand_t(&mut rng, &[2, 5])],
        Box::new(|t, v| {
            let r = t.relu(v[0])?;
            let g = t.gelu(v[1])?;
            let m = t.mul(r, g)?;
            let s = t.add(m, g)?;
            t.mean(s)
        }),
    );
    push(
        "conv_zero_pad",
        vec![rand_t(&mut rng, &[1, 2, 5, 5]), rand_t(&mut rng, &[3, 2, 3, 3]), rand_t(&mut rng, &[3])],
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Zero(1))?;
            project(t, y, 11)
        }),
    );
    push(
        "conv_replicate_stride2",
        vec![rand_t(&mut rng, &[2, 1, 6, 5]), rand_t(&mut rng, &[2, 1, 3, 3])],
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], None, 2, Padding::Replicate(1))?;
            project(t, y, 12)
        }),
    );
    push(
        "conv_5x5_stride_pad2",
        vec![rand_t(&mut rng, &[1, 1, 8, 8]), rand_t(&mut rng, &[2, 1, 5, 5]), rand_t(&mut rng, &[2])],
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 4, Padding::Zero(2))?;
            let y = t.square(y)?;
            project(t, y, 13)
        }),
    );
    push(
        "linear_bias",
        vec![rand_t(&mut rng, &[2, 3, 4]), rand_t(&mut rng, &[5, 4]), rand_t(&mut rng, &[5])],
        Box::new(|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, 14)
        }),
    );
    push(
        "linear_gelu_chain",
        vec![rand_t(&mut rng, &[3, 6]), rand_t(&mut rng, &[4, 6]), rand_t(&mut rng, &[2, 4])],
        Box::new(|t, v| {
            let y = t.linear(v[0], v[1], None)?;
            let y = t.gelu(y)?;
            let z = t.linear(y, v[2], None)?;
            project(t, z, 15)
        }),
    );
    push(
        "layer_norm",
        vec![rand_t(&mut rng, &[2, 3, 8]), rand_t(&mut rng, &[8]), rand_t(&mut rng, &[8])],
        Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            project(t, y, 16)
        }),
    );
    push(
        "rms_norm",
        vec![rand_t(&mut rng, &[2, 2, 3, 3])],
        Box::new(|t, v| {
            let y = t.rms_norm(v[0])?;
            project(t, y, 17)
        }),
    );
    push(
        "attention_one_head",
        vec![rand_t(&mut rng, &[1, 4, 4]), rand_t(&mut rng, &[1, 4, 4]), rand_t(&mut rng, &[1, 4, 4])],
        Box::new(|t, v| {
            let (y, _) = t.attention(v[0], v[1], v[2], 1)?;
            project(t, y, 18)
        }),
    );
    push(
        "attention_two_heads",
        vec![rand_t(&mut rng, &[2, 3, 8]), rand_t(&mut rng, &[2, 3, 8]), rand_t(&mut rng, &[2, 3, 8])],
        Box::new(|t, v| {
            let (y, _) = t.attention(v[0], v[1], v[2], 2)?;
            project(t, y, 19)
        }),
    );
    push(
        "self_attention_shared_input",
        vec![rand_t(&mut rng, &[1, 5, 4]), rand_t(&mut rng, &[4, 4])],
        Box::new(|t, v| {
            let q = t.linear(v[0], v[1], None)?;
            let (y, _) = t.attention(q, v[0], v[0], 2)?;
            project(t, y, 20)
        }),
    );
    push(
        "global_avg_pool",
        vec![rand_t(&mut rng, &[2, 3, 3, 3])],
        Box::new(|t, v| {
            let sq = t.square(v[0])?;
            let y = t.global_avg_pool(sq)?;
            project(t, y, 21)
        }),
    );
    push(
        "avg_pool_upsample",
        vec![rand_t(&mut rng, &[1, 2, 4, 4])],
        Box::new(|t, v| {
            let p = t.avg_pool(v[0], 2)?;
            let p = t.square(p)?;
            let u = t.upsample_nearest(p, 2)?;
            let s = t.mul(u, v[0])?;
            project(t, s, 22)
        }),
    );
    push(
        "patchify",
        vec![rand_t(&mut rng, &[1, 2, 4, 4]), rand_t(&mut rng, &[3, 8])],
        Box::new(|t, v| {
            let p = t.patchify(v[0], 2)?;
            let y = t.linear(p, v[1], None)?;
            project(t, y, 23)
        }),
    );
    push(
        "tokens_round_trip",
        vec![rand_t(&mut rng, &[2, 3, 2, 3])],
        Box::new(|t, v| {
            let tok = t.map_to_tokens(v[0])?;
            let sq = t.square(tok)?;
            let m = t.tokens_to_map(sq, 2, 3)?;
            let s = t.mul(m, v[0])?;
            project(t, s, 24)
        }),
    );
    push(
        "class_token",
        vec![rand_t(&mut rng, &[4]), rand_t(&mut rng, &[2, 3, 4])],
        Box::new(|t, v| {
            let all = t.prepend_token(v[0], v[1])?;
            let sq = t.square(all)?;
            let head = t.slice_tokens(sq, 0, 2)?;
            project(t, head, 25)
        }),
    );
    push(
        "patch_token_update",
        vec![rand_t(&mut rng, &[1, 4, 3]), rand_t(&mut rng, &[1, 3, 3])],
        Box::new(|t, v| {
            let y = t.add_to_patch_tokens(v[0], v[1])?;
            let y = t.gelu(y)?;
            project(t, y, 26)
        }),
    );
    push(
        "bce_two_class",
        vec![rand_t(&mut rng, &[4, 2])],
        Box::new(|t, v| {
            let s = t.scale(v[0], 3.0)?;
            t.bce_with_logits(s, &[0.0, 1.0, 1.0, 0.0])
        }),
    );
    push(
        "conv_to_tokens_to_bce",
        vec![rand_t(&mut rng, &[2, 1, 4, 4]), rand_t(&mut rng, &[2, 1, 3, 3]), rand_t(&mut rng, &[2, 2])],
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, Padding::Zero(1))?;
            let g = t.gelu(y)?;
            let tok = t.map_to_tokens(g)?;
            let (a, _) = t.attention(tok, tok, tok, 1)?;
            let m = t.tokens_to_map(a, 4, 4)?;
            let logits = t.global_avg_pool(m)?;
            t.bce_with_logits(logits, &[1.0, 0.0])
        }),
    );
    assert_eq!(g.len(), 20);
    g
}

/// Autodiff vs central differences for every parameter of a model, loss =
/// sum of the two branch losses. Edge maps are captured once at the base
/// point and held fixed, matching their stop-gradient role.
pub fn model_gradcheck(
    model: &floc_core::model::Model<f64>,
    input: &Tensor<f64>,
    labels: &[f64],
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    use floc_core::model::total_loss;
    let loss_at = |m: &floc_core::model::Model<f64>, frozen: Option<&[Option<Tensor<f64>>]>| {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(input.clone());
        let out = m.forward(&mut tape, x, frozen).expect("forward");
        let loss = total_loss(&mut tape, out.conv_logits, out.trans_logits, labels).expect("loss");
        (tape, out, loss)
    };
    let (mut tape, out, loss) = loss_at(model, None);
    let edges = out.edges.clone();
    tape.backward(loss).expect("backward");
    let auto: Vec<f64> = model.params.grads(&tape).into_iter().flat_map(Tensor::into_data).collect();

    let mut work = model.clone();
    let mut fd = Vec::with_capacity(auto.len());
    for p in 0..work.params.len() {
        for j in 0..work.params.values()[p].numel() {
            let orig = work.params.values()[p].data()[j];
            work.params.values_mut()[p].data_mut()[j] = orig + h;
            let (t, _, l) = loss_at(&work, Some(&edges));
            let plus = t.value(l).item();
            work.params.values_mut()[p].data_mut()[j] = orig - h;
            let (t, _, l) = loss_at(&work, Some(&edges));
            let minus = t.value(l).item();
            work.params.values_mut()[p].data_mut()[j] = orig;
            fd.push((plus - minus) / (2.0 * h));
        }
    }
    (auto, fd)
}
