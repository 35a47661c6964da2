mod common;

use common::*;
use fqdet::data::{generate_sample, SceneSpec};
use fqdet::evalkit::{ap_eval, candidates_new, candidates_old, infer_new, infer_old, EvalConfig, HeadOutput, InferConfig};
use fqdet::geometry::{decode_box, encode_box, giou, iou, BoxXYXY, ImageSize};
use fqdet::matching::{hungarian, top_k_match, Matrix};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn boxes() -> impl Strategy<Value = BoxXYXY> {
    (0.0..100.0f64, 0.0..100.0f64, 0.5..50.0f64, 0.5..50.0f64).prop_map(|(x, y, w, h)| BoxXYXY::new(x, y, x + w, y + h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in boxes(), b in boxes()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        let g = giou(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&g));
        prop_assert!(g <= v + 1e-12);
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_equals_iou_under_containment(a in boxes(), f in 0.0..1.0f64, g in 0.0..1.0f64, s in 0.1..1.0f64) {
        let w = a.width() * s;
        let h = a.height() * s;
        let x = a.x1 + f * (a.width() - w);
        let y = a.y1 + g * (a.height() - h);
        let inner = BoxXYXY::new(x, y, x + w, y + h);
        prop_assert!((giou(&a, &inner) - iou(&a, &inner)).abs() < 1e-9);
    }

    #[test]
    fn decode_inverts_encode(t in boxes(), dx in -2.0..2.0f64, dy in -2.0..2.0f64, sw in -3.0..3.0f64, sh in -3.0..3.0f64) {
        // Size ratios stay inside the decode clamp, beyond which inversion is not defined.
        let (w, h) = (t.width() * sw.exp(), t.height() * sh.exp());
        let (cx, cy) = (t.x1 + t.width() * (0.5 + dx), t.y1 + t.height() * (0.5 + dy));
        let a = BoxXYXY::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
        let d = encode_box(&t, &a).unwrap();
        let back = decode_box(&d, &a, ImageSize::new(1000, 1000));
        for (x, y) in back.to_array().iter().zip(t.to_array()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn raising_k_never_loses_positives(rows in 1usize..5, cols in 1usize..20, seed in any::<u64>(), k in 1usize..10) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rand::Rng::gen::<f64>(&mut r)).collect();
        let m = Matrix::new(rows, cols, data).unwrap();
        let a = top_k_match(&m, k).unwrap().num_positives();
        let b = top_k_match(&m, k + 1).unwrap().num_positives();
        prop_assert!(b >= a);
        prop_assert_eq!(top_k_match(&m, k).unwrap(), top_k_match(&m, k).unwrap());
    }

    #[test]
    fn hungarian_beats_random_permutations(rows in 1usize..6, extra in 0usize..4, seed in any::<u64>()) {
        let cols = rows + extra;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rand::Rng::gen_range(&mut r, -5.0..5.0)).collect();
        let m = Matrix::new(rows, cols, data).unwrap();
        let best = hungarian(&m).unwrap().total;
        let mut perm: Vec<usize> = (0..cols).collect();
        for _ in 0..1000 {
            perm.shuffle(&mut r);
            let total: f64 = (0..rows).map(|i| m.get(i, perm[i])).sum();
            prop_assert!(best <= total + 1e-9);
        }
    }

    #[test]
    fn ap_ignores_detection_order_and_duplicates_never_help(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let gts: Vec<_> = (0..4).map(|_| gt(random_box(&mut r, 80.0, 4.0).to_array(), rand::Rng::gen_range(&mut r, 0..2))).collect();
        let mut dets: Vec<_> = gts
            .iter()
            .map(|g| det(g.bbox.to_array(), g.class_id, rand::Rng::gen_range(&mut r, 0.2..1.0)))
            .collect();
        for _ in 0..4 {
            let b = random_box(&mut r, 80.0, 4.0).to_array();
            dets.push(det(b, rand::Rng::gen_range(&mut r, 0..2), rand::Rng::gen::<f64>(&mut r)));
        }
        let cfg = EvalConfig::default();
        let base = ap_eval(&[dets.clone()], &[gts.clone()], &cfg).unwrap();
        dets.shuffle(&mut r);
        let shuffled = ap_eval(&[dets.clone()], &[gts.clone()], &cfg).unwrap();
        prop_assert!((base.ap - shuffled.ap).abs() < 1e-12);
        let mut dup = dets[0];
        dup.score *= 0.5;
        dets.push(dup);
        let with_dup = ap_eval(&[dets], &[gts], &cfg).unwrap();
        prop_assert!(with_dup.ap <= base.ap + 1e-12);
    }

    #[test]
    fn new_candidates_cover_old_ones(q in 1usize..8, c in 1usize..4, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..q * (c + 1)).map(|_| rand::Rng::gen_range(&mut r, -4.0..4.0)).collect();
        let deltas: Vec<[f64; 4]> = (0..q).map(|_| [0.0; 4]).collect();
        let anchors: Vec<BoxXYXY> = (0..q).map(|_| random_box(&mut r, 64.0, 4.0)).collect();
        let out = HeadOutput { logits: &logits, deltas: &deltas, anchors: &anchors, num_classes: c, image: ImageSize::new(64, 64) };
        let old = candidates_old(&out).unwrap();
        let new = candidates_new(&out).unwrap();
        prop_assert_eq!(new.len(), q * c);
        for d in &old {
            prop_assert!(new.contains(d));
        }
        let cfg = InferConfig::default();
        prop_assert!(infer_old(&out, &cfg).unwrap().len() <= 100);
        prop_assert!(infer_new(&out, &cfg).unwrap().len() <= 100);
        if c == 1 {
            prop_assert_eq!(infer_old(&out, &cfg).unwrap(), infer_new(&out, &cfg).unwrap());
        }
    }
}

/// Bounding box of the pixel centers a shape covers, from an independent scan.
fn support_box(shape: &fqdet::data::Shape, w: usize, h: usize) -> Option<[f64; 4]> {
    let mut b: Option<[f64; 4]> = None;
    for y in 0..h {
        for x in 0..w {
            if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                let (x, y) = (x as f64, y as f64);
                b = Some(match b {
                    None => [x, y, x + 1.0, y + 1.0],
                    Some(c) => [c[0].min(x), c[1].min(y), c[2].max(x + 1.0), c[3].max(y + 1.0)],
                });
            }
        }
    }
    b
}

#[test]
fn recorded_boxes_match_rendered_support() {
    let spec = SceneSpec::default();
    for index in 0..200 {
        let s = generate_sample(&spec, index).unwrap();
        assert_eq!(s.shapes.len(), s.gts.len());
        for (shape, g) in s.shapes.iter().zip(&s.gts) {
            let support = support_box(shape, spec.width, spec.height).expect("shape covers pixels");
            let v = iou(&g.bbox, &BoxXYXY::new(support[0], support[1], support[2], support[3]));
            assert!(v >= 0.99, "sample {index}: IoU {v}");
        }
    }
}

#[test]
fn object_counts_stay_in_range() {
    let spec = SceneSpec {
        width: 32,
        height: 32,
        min_size: 4.0,
        max_size: 12.0,
        min_objects: 2,
        max_objects: 5,
        ..SceneSpec::default()
    };
    for index in 0..10_000 {
        let s = generate_sample(&spec, index).unwrap();
        assert!((2..=5).contains(&s.gts.len()), "sample {index}: {}", s.gts.len());
        assert!(s.gts.iter().all(|g| g.bbox.x1 >= 0.0 && g.bbox.y1 >= 0.0 && g.bbox.x2 <= 32.0 && g.bbox.y2 <= 32.0));
    }
}
