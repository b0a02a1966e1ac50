use proptest::collection::vec;
use proptest::prelude::*;

use floc_core::cam::{
    aggregate_maps, attention_average, conv_cam, decode_camf, encode_camf, fuse_cam, min_max_normalize, CamClass, CamMap,
};
use floc_core::cgsr::{
    binarize_coarse_mask, generate_prompts, refine, region_grow, PromptMode, Refiner, RegionGrowParams,
};
use floc_core::eval::{image_auc, pixel_f1};
use floc_core::imgproc::{BinaryMask, Image};
use floc_core::tensor::Tensor;

fn grid() -> impl Strategy<Value = (usize, usize)> {
    (2usize..9, 2usize..9)
}

fn cam_on(w: usize, h: usize) -> impl Strategy<Value = CamMap> {
    vec(-5.0f64..5.0, w * h).prop_map(move |raw| CamMap::from_raw(CamClass::Manipulated, w, h, raw).unwrap())
}

fn cam() -> impl Strategy<Value = CamMap> {
    grid().prop_flat_map(|(w, h)| cam_on(w, h))
}

fn mask_on(w: usize, h: usize) -> impl Strategy<Value = BinaryMask> {
    vec(any::<bool>(), w * h).prop_map(move |d| BinaryMask::new(w, h, d).unwrap())
}

fn image_on(w: usize, h: usize) -> impl Strategy<Value = Image> {
    vec(any::<u8>(), w * h * 3).prop_map(move |d| Image::new(w, h, 3, d).unwrap())
}

/// Same-size pair of Q/K stacks with a class token.
fn qk(layers: usize, t: usize, dim: usize) -> impl Strategy<Value = (Vec<Tensor<f64>>, Vec<Tensor<f64>>)> {
    let one = move || vec(-3.0f64..3.0, t * dim).prop_map(move |d| Tensor::new(vec![t, dim], d).unwrap());
    (vec(one(), layers), vec(one(), layers))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn normalized_maps_stay_in_unit_interval(raw in vec(-1e6f64..1e6, 1..64)) {
        let n = min_max_normalize(&raw);
        prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn constant_maps_normalize_to_zero(c in -100.0f64..100.0, len in 1usize..40) {
        prop_assert!(min_max_normalize(&vec![c; len]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fused_map_dominates_both_inputs(
        (trans, conv, (q, k)) in (2usize..5, 2usize..5).prop_flat_map(|(w, h)| (cam_on(w, h), cam_on(w, h), qk(2, w * h + 1, 4)))
    ) {
        let a = attention_average(&q, &k, 4, 2).unwrap();
        let fused = fuse_cam(&trans, &conv, &a).unwrap();
        let refined = min_max_normalize(&a.apply(&conv.raw).unwrap());
        for ((&f, &t), &r) in fused.normalized.iter().zip(&trans.normalized).zip(&refined) {
            prop_assert!(f >= t);
            prop_assert!(f >= r - 1e-12);
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn affinity_rows_are_distributions((q, k) in (1usize..4, 2usize..12).prop_flat_map(|(l, t)| qk(l, t, 8))) {
        let a = attention_average(&q, &k, 8, 4).unwrap();
        for i in 0..a.size {
            let row = a.row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_cam_argmax_survives_positive_scaling(
        feats in vec(-2.0f64..2.0, 3 * 5 * 4),
        w in vec(-2.0f64..2.0, 6),
        c in 0.01f64..100.0,
    ) {
        let f = Tensor::new(vec![3, 5, 4], feats).unwrap();
        let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
        let a = conv_cam(&f, &Tensor::new(vec![2, 3], w).unwrap(), CamClass::Manipulated).unwrap();
        let b = conv_cam(&f, &Tensor::new(vec![2, 3], scaled).unwrap(), CamClass::Manipulated).unwrap();
        // exact ties can flip under rounding, so compare values at the two argmaxes
        let (ax, ay) = a.argmax();
        let (bx, by) = b.argmax();
        prop_assert!((a.raw_at(bx, by) - a.raw_at(ax, ay)).abs() <= 1e-9 * (1.0 + a.raw_at(ax, ay).abs()));
    }

    #[test]
    fn identical_maps_aggregate_to_themselves(m in cam()) {
        let agg = aggregate_maps(&[m.clone(), m.clone(), m.clone()], m.width, m.height).unwrap();
        for (a, b) in agg.raw.iter().zip(&m.raw) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn camf_round_trip(m in cam()) {
        let (h, w, data) = decode_camf(&encode_camf(&m)).unwrap();
        prop_assert_eq!((w, h), (m.width, m.height));
        for (a, b) in data.iter().zip(&m.raw) {
            prop_assert_eq!(*a, *b as f32);
        }
    }

    #[test]
    fn prompt_invariants((m, mask) in grid().prop_flat_map(|(w, h)| (cam_on(w, h), mask_on(w, h)))) {
        for mode in PromptMode::ALL {
            let p = generate_prompts(&m, &mask, mode).unwrap();
            if mode == PromptMode::Null || mask.is_empty() {
                prop_assert!(p.bbox.is_none() && p.points.is_empty());
                prop_assert_eq!(p.empty_coarse, mode != PromptMode::Null && mask.is_empty());
                continue;
            }
            prop_assert_eq!(p.bbox.is_some(), mode.uses_box());
            if let Some(b) = p.bbox {
                prop_assert!(b.x0 <= b.x1 && b.x1 < m.width && b.y0 <= b.y1 && b.y1 < m.height);
            }
            prop_assert_eq!(p.points.iter().filter(|q| q.positive).count(), usize::from(mode.uses_points()));
            prop_assert!(p.points.iter().filter(|q| !q.positive).count() <= 1);
            if let (Some(pos), Some(neg)) = (p.positive(), p.negative()) {
                prop_assert!(m.raw_at(pos.x, pos.y) >= m.raw_at(neg.x, neg.y));
            }
            if let (Some(b), Some(pos)) = (p.bbox, p.positive()) {
                prop_assert!(b.contains(pos.x, pos.y));
            }
            for q in &p.points {
                prop_assert!(q.x < m.width && q.y < m.height);
            }
        }
    }

    #[test]
    fn no_refiner_returns_coarse((m, mask, img) in grid().prop_flat_map(|(w, h)| (cam_on(w, h), mask_on(w, h), image_on(w, h)))) {
        let p = generate_prompts(&m, &mask, PromptMode::BoxPoint).unwrap();
        let out = refine(&img, &p, &mask, &Refiner::None).unwrap();
        prop_assert_eq!(out.mask, mask);
        prop_assert!(out.error.is_none());
    }

    #[test]
    fn region_grow_stays_in_box((m, mask, img) in grid().prop_flat_map(|(w, h)| (cam_on(w, h), mask_on(w, h), image_on(w, h)))) {
        let p = generate_prompts(&m, &mask, PromptMode::BoxPoint).unwrap();
        let grown = region_grow(&img, &p, &mask, &RegionGrowParams::default()).unwrap();
        prop_assert_eq!((grown.width(), grown.height()), (img.width(), img.height()));
        if let Some(b) = p.bbox {
            prop_assert!(grown.is_subset_of(&BinaryMask::from_bbox(img.width(), img.height(), b)));
        }
    }

    #[test]
    fn higher_rho_gives_subset(m in cam(), r1 in 0.01f64..0.99, r2 in 0.01f64..0.99, up in 1usize..4) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let (w, h) = (m.width * up, m.height * up);
        let a = binarize_coarse_mask(&m, lo, w, h).unwrap();
        let b = binarize_coarse_mask(&m, hi, w, h).unwrap();
        prop_assert!(b.is_subset_of(&a));
    }

    #[test]
    fn f1_is_symmetric_and_bounded((a, b) in grid().prop_flat_map(|(w, h)| (mask_on(w, h), mask_on(w, h)))) {
        let ab = pixel_f1(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, pixel_f1(&b, &a).unwrap());
        prop_assert_eq!(pixel_f1(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn auc_ignores_monotone_transforms(
        pairs in vec((-10.0f64..10.0, any::<bool>()), 2..60)
            .prop_filter("both classes", |p| p.iter().any(|x| x.1) && p.iter().any(|x| !x.1)),
    ) {
        let (s, l): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        let auc = image_auc(&s, &l).unwrap();
        prop_assert!((0.0..=1.0).contains(&auc));
        let t: Vec<f64> = s.iter().map(|v| (v / 4.0).exp() * 3.0 + 1.0).collect();
        prop_assert!((image_auc(&t, &l).unwrap() - auc).abs() < 1e-12);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((image_auc(&neg, &l).unwrap() - (1.0 - auc)).abs() < 1e-12);
    }
}
