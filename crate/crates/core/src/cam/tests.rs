use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::ModelConfig;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn one_hot_weights(n: usize, row: usize, j: usize) -> Tensor<f64> {
    Tensor::from_fn(&[2, n], |i| if i == row * n + j { 1.0 } else { 0.0 })
}

#[test]
fn normalization_rules() {
    assert_eq!(min_max_normalize(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
    assert_eq!(min_max_normalize(&[7.0; 4]), vec![0.0; 4]);
}

#[test]
fn one_hot_conv_weights_select_a_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let feat = random(&[5, 3, 4], &mut rng);
    let cam = conv_cam(&feat, &one_hot_weights(5, 1, 3), CamClass::Manipulated).unwrap();
    assert_eq!(cam.raw, feat.data()[3 * 12..4 * 12].to_vec());
    assert_eq!((cam.width, cam.height), (4, 3));
}

#[test]
fn zero_conv_weights_give_zero_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feat = random(&[4, 5, 5], &mut rng);
    let cam = conv_cam(&feat, &Tensor::zeros(&[2, 4]), CamClass::Manipulated).unwrap();
    assert!(cam.raw.iter().all(|&v| v == 0.0));
    assert!(cam.normalized.iter().all(|&v| v == 0.0));
}

#[test]
fn conv_cam_matches_pixelwise_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, h, w) = (6, 4, 7);
    let feat = random(&[c, h, w], &mut rng);
    let weights = random(&[2, c], &mut rng);
    for class in [CamClass::Authentic, CamClass::Manipulated] {
        let cam = conv_cam(&feat, &weights, class).unwrap();
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for k in 0..c {
                    s += weights.data()[class.index() * c + k] * feat.data()[(k * h + y) * w + x];
                }
                assert!((cam.raw_at(x, y) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv_cam_rejects_channel_mismatch() {
    let feat = Tensor::<f64>::zeros(&[3, 2, 2]);
    assert!(conv_cam(&feat, &Tensor::zeros(&[2, 4]), CamClass::Manipulated).is_err());
    assert!(conv_cam(&Tensor::<f64>::zeros(&[3, 4]), &Tensor::zeros(&[2, 3]), CamClass::Manipulated).is_err());
}

#[test]
fn trans_cam_one_hot_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tokens = random(&[9, 5], &mut rng);
    let cam = trans_cam(&tokens, &one_hot_weights(5, 1, 2), CamClass::Manipulated).unwrap();
    let coord: Vec<f64> = (0..9).map(|i| tokens.data()[i * 5 + 2]).collect();
    assert_eq!(cam.raw, coord);
    assert_eq!((cam.width, cam.height), (3, 3));

    let weights = random(&[2, 5], &mut rng);
    let cam = trans_cam(&tokens, &weights, CamClass::Authentic).unwrap();
    for i in 0..9 {
        let s: f64 = (0..5).map(|k| tokens.data()[i * 5 + k] * weights.data()[k]).sum();
        assert!((cam.raw[i] - s).abs() < 1e-12);
    }
}

#[test]
fn trans_cam_equal_tokens_normalize_to_zero() {
    let tokens = Tensor::<f64>::full(&[16, 4], 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cam = trans_cam(&tokens, &random(&[2, 4], &mut rng), CamClass::Manipulated).unwrap();
    assert!(cam.normalized.iter().all(|&v| v == 0.0));
}

#[test]
fn trans_cam_requires_square_grid() {
    let tokens = Tensor::<f64>::zeros(&[8, 4]);
    assert!(trans_cam(&tokens, &Tensor::zeros(&[2, 4]), CamClass::Manipulated).is_err());
}

#[test]
fn identical_tokens_give_uniform_affinity() {
    let q = Tensor::<f64>::full(&[5, 4], 0.7);
    let a = attention_average(&[q.clone()], &[q], 4, 2).unwrap();
    assert_eq!(a.size, 4);
    assert!(a.data.iter().all(|v| (v - 0.25).abs() < 1e-12));
}

#[test]
fn averaging_a_layer_with_itself_is_a_no_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = random(&[10, 8], &mut rng);
    let k = random(&[10, 8], &mut rng);
    let one = attention_average(&[q.clone()], &[k.clone()], 8, 2).unwrap();
    let two = attention_average(&[q.clone(), q], &[k.clone(), k], 8, 2).unwrap();
    for (a, b) in one.data.iter().zip(&two.data) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn affinity_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let qs: Vec<_> = (0..3).map(|_| random(&[17, 8], &mut rng).map(|v| v * 4.0)).collect();
    let ks: Vec<_> = (0..3).map(|_| random(&[17, 8], &mut rng).map(|v| v * 4.0)).collect();
    let a = attention_average(&qs, &ks, 8, 4).unwrap();
    for i in 0..a.size {
        assert!(a.row(i).iter().all(|&v| v >= 0.0));
        assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn affinity_errors() {
    let q = Tensor::<f64>::zeros(&[5, 4]);
    assert!(attention_average::<f64>(&[], &[], 4, 2).is_err());
    assert!(attention_average(&[q.clone(), q.clone()], &[q.clone()], 4, 2).is_err());
    assert!(attention_average(&[q.clone()], &[q], 4, 3).is_err());
}

#[test]
fn affinity_agrees_with_the_tape_attention_kernel() {
    let cfg = ModelConfig {
        input_size: 32,
        num_blocks: 2,
        cabl_depth: 2,
        ..ModelConfig::default()
    };
    let model = Model::<f64>::new(cfg.clone(), 3).unwrap();
    let img = Image::filled(32, 32, [90, 140, 30]);
    let (_, out) = model.run(batch_tensor(&[&img], 32).unwrap()).unwrap();
    let t = out.queries[0].shape()[1];
    let a = attention_average(&[out.queries[0].select(0)], &[out.keys[0].select(0)], cfg.token_dim, cfg.heads).unwrap();
    let probs = &out.attention[0];
    let s = cfg.heads;
    for i in 1..t {
        let mut row: Vec<f64> = (1..t)
            .map(|j| (0..s).map(|h| probs.data()[(h * t + i) * t + j]).sum::<f64>() / s as f64)
            .collect();
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
        for (x, y) in row.iter().zip(a.row(i - 1)) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

fn uniform(n: usize) -> Affinity {
    Affinity {
        size: n,
        data: vec![1.0 / n as f64; n * n],
    }
}

#[test]
fn uniform_affinity_fixes_a_constant_map() {
    let conv = CamMap::from_raw(CamClass::Manipulated, 3, 3, vec![2.5; 9]).unwrap();
    let trans = CamMap::from_raw(CamClass::Manipulated, 3, 3, vec![0.0; 9]).unwrap();
    let f = fuse_cam(&trans, &conv, &uniform(9)).unwrap();
    assert!(f.raw.iter().all(|v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn zero_trans_map_leaves_refined_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let conv = CamMap::from_raw(CamClass::Manipulated, 4, 4, (0..16).map(|_| rng.random()).collect()).unwrap();
    let trans = CamMap::from_raw(CamClass::Manipulated, 4, 4, vec![0.0; 16]).unwrap();
    let a = attention_average(&[random(&[17, 4], &mut rng)], &[random(&[17, 4], &mut rng)], 4, 1).unwrap();
    let f = fuse_cam(&trans, &conv, &a).unwrap();
    assert_eq!(f.normalized, min_max_normalize(&a.apply(&conv.raw).unwrap()));
}

#[test]
fn fused_map_dominates_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let conv = CamMap::from_raw(CamClass::Manipulated, 4, 4, (0..16).map(|_| rng.random()).collect()).unwrap();
    let trans = CamMap::from_raw(CamClass::Manipulated, 4, 4, (0..16).map(|_| rng.random()).collect()).unwrap();
    let a = attention_average(&[random(&[17, 4], &mut rng)], &[random(&[17, 4], &mut rng)], 4, 2).unwrap();
    let f = fuse_cam(&trans, &conv, &a).unwrap();
    let refined = min_max_normalize(&a.apply(&conv.raw).unwrap());
    for i in 0..16 {
        assert!(f.normalized[i] >= trans.normalized[i] && f.normalized[i] >= refined[i]);
    }
}

#[test]
fn fuse_rejects_grid_mismatch() {
    let a = CamMap::from_raw(CamClass::Manipulated, 2, 2, vec![0.0; 4]).unwrap();
    let b = CamMap::from_raw(CamClass::Manipulated, 3, 3, vec![0.0; 9]).unwrap();
    assert!(fuse_cam(&a, &b, &uniform(9)).is_err());
    assert!(fuse_cam(&a, &a, &uniform(9)).is_err());
}

#[test]
fn pooling_and_arg_extrema() {
    let cam = CamMap::from_raw(CamClass::Manipulated, 4, 2, vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, -4.0, 0.0]).unwrap();
    let p = cam.avg_pool(2).unwrap();
    assert_eq!(p.raw, vec![4.0, -1.0]);
    assert_eq!(cam.argmax(), (1, 1));
    assert_eq!(cam.argmin(), (2, 1));
    assert!(cam.avg_pool(3).is_err());
}

#[test]
fn aggregation_of_one_map_is_its_resize() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = CamMap::from_raw(CamClass::Manipulated, 4, 4, (0..16).map(|_| rng.random()).collect()).unwrap();
    let agg = aggregate_maps(&[m.clone()], 12, 12).unwrap();
    assert_eq!(agg, m.resize(12, 12).unwrap());
}

#[test]
fn aggregation_of_identical_maps_is_the_common_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = CamMap::from_raw(CamClass::Manipulated, 6, 6, (0..36).map(|_| rng.random()).collect()).unwrap();
    let agg = aggregate_maps(&[m.clone(), m.clone(), m.clone()], 6, 6).unwrap();
    for (a, b) in agg.raw.iter().zip(&m.raw) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in agg.normalized.iter().zip(&m.normalized) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn multi_scale_on_default_scales() {
    let model = Model::<f32>::new(ModelConfig::default(), 4).unwrap();
    let img = crate::data::authentic_sample(80, 3, 0, &Default::default());
    let cam = multi_scale_cam(&model, &img, &[64, 96, 128], CamClass::Manipulated).unwrap();
    assert_eq!((cam.width, cam.height), (80, 80));
    assert!(cam.normalized.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(multi_scale_cam(&model, &img, &[], CamClass::Manipulated).is_err());
    assert!(multi_scale_cam(&model, &img, &[60], CamClass::Manipulated).is_err());
}

#[test]
fn single_scale_equals_resized_fused_map() {
    let cfg = ModelConfig {
        num_blocks: 2,
        cabl_depth: 2,
        ..ModelConfig::default()
    };
    let model = Model::<f32>::new(cfg, 5).unwrap();
    let img = crate::data::authentic_sample(48, 3, 1, &Default::default());
    let cam = multi_scale_cam(&model, &img, &[64], CamClass::Manipulated).unwrap();
    let (tape, out) = model.run(batch_tensor(&[&img], 64).unwrap()).unwrap();
    let fused = cams_from_outputs(&model, &tape, &out, 0, CamClass::Manipulated).unwrap().fused;
    assert_eq!(cam, fused.resize(48, 48).unwrap());
}

#[test]
fn camf_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.camf");
    let m = CamMap::from_raw(CamClass::Manipulated, 3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.5, 3.25]).unwrap();
    write_camf(&path, &m, &[64, 96]).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"CAMF");
    assert_eq!(bytes.len(), 12 + 6 * 4);
    let (h, w, v, side) = read_camf(&path).unwrap();
    assert_eq!((h, w), (2, 3));
    assert_eq!(v, vec![0.5, -1.0, 2.0, 0.0, 1.5, 3.25]);
    assert_eq!(side.scales, vec![64, 96]);
    assert_eq!((side.min, side.max), (-1.0, 3.25));
    assert!(decode_camf(b"CAMX\0\0\0\0\0\0\0\0").is_err());
    assert!(decode_camf(&bytes[..bytes.len() - 1]).is_err());
}
