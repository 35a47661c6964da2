mod common;

use common::*;
use fqdet::evalkit::{ap_eval, nms, EvalConfig};
use fqdet::geometry::{decode_box, encode_box, giou, iou, AnchorConfig, AnchorSet, BoxXYXY, ImageSize, LevelShape};
use fqdet::matching::{absolute_match, hungarian, top_k_match, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// IoU-like matrix with a share of exact zeros and repeated values so that
/// tie rules are exercised.
fn random_overlaps<R: Rng>(r: &mut R, g: usize, n: usize) -> Vec<Vec<f64>> {
    (0..g)
        .map(|_| {
            (0..n)
                .map(|_| match r.gen_range(0..4) {
                    0 => 0.0,
                    1 => (r.gen_range(0..10) as f64) / 10.0,
                    _ => r.gen::<f64>(),
                })
                .collect()
        })
        .collect()
}

fn matrix(rows: &[Vec<f64>], cols: usize) -> Matrix {
    Matrix::new(rows.len(), cols, rows.concat()).unwrap()
}

#[test]
fn top_k_equals_exhaustive_oracle() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let g = r.gen_range(0..6);
        let n = r.gen_range(1..25);
        let k = r.gen_range(1..8);
        let m = random_overlaps(&mut r, g, n);
        let got = top_k_match(&matrix(&m, n), k).unwrap();
        assert_eq!(got.labels, top_k_oracle(&m, n, k), "{m:?} k={k}");
    }
}

#[test]
fn absolute_equals_exhaustive_oracle() {
    let mut r = rng(2);
    for _ in 0..1000 {
        let g = r.gen_range(0..6);
        let n = r.gen_range(1..25);
        let m = random_overlaps(&mut r, g, n);
        let got = absolute_match(&matrix(&m, n), 0.7, 0.3).unwrap();
        assert_eq!(got.labels, absolute_oracle(&m, n, 0.7, 0.3), "{m:?}");
    }
}

#[test]
fn hungarian_equals_permutation_brute_force() {
    let mut r = rng(3);
    for i in 0..200 {
        let g = r.gen_range(1..=6);
        let q = r.gen_range(g..=7);
        let cost: Vec<Vec<f64>> = (0..g)
            .map(|_| {
                (0..q)
                    .map(|_| if i % 2 == 0 { r.gen_range(0..6) as f64 } else { r.gen_range(-3.0..5.0) })
                    .collect()
            })
            .collect();
        let a = hungarian(&matrix(&cost, q)).unwrap();
        let mut cols = a.columns.clone();
        cols.sort_unstable();
        cols.dedup();
        assert_eq!(cols.len(), g, "assignment must be injective");
        assert_eq!(a.total, assignment_brute_force(&cost, q), "{cost:?}");
    }
}

#[test]
fn hungarian_worked_example() {
    let a = hungarian(&Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 2.0, 4.0, 1.0]).unwrap()).unwrap();
    assert_eq!(a.columns, vec![0, 2]);
    assert_eq!(a.total, 2.0);
    assert_eq!(assignment_brute_force(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 1.0]], 3), 2.0);
}

#[test]
fn nms_equals_quadratic_reference() {
    let mut r = rng(4);
    for _ in 0..1000 {
        let n = r.gen_range(0..30);
        let boxes: Vec<BoxXYXY> = (0..n).map(|_| random_box(&mut r, 60.0, 2.0)).collect();
        let scores: Vec<f64> = (0..n)
            .map(|_| if r.gen_bool(0.2) { 0.5 } else { r.gen::<f64>() })
            .collect();
        let thr = r.gen_range(0.1..0.9);
        assert_eq!(nms(&boxes, &scores, thr), nms_reference(&boxes, &scores, thr));
    }
}

#[test]
fn ap_reproduces_hand_fixtures() {
    let cfg = EvalConfig {
        iou_thresholds: vec![0.5],
        ..EvalConfig::default()
    };
    for (name, dets, gts, want) in ap_fixtures() {
        let got = ap_eval(&dets, &gts, &cfg).unwrap();
        assert!((got.ap - want).abs() < 1e-6, "{name}: {} vs {want}", got.ap);
        assert!((got.ap50 - want).abs() < 1e-6, "{name}");
        let classes = gts.iter().flatten().map(|g| g.class_id + 1).max().unwrap();
        let script: Vec<f64> = (0..classes).filter_map(|c| ap_reference(&dets, &gts, c, 0.5)).collect();
        let mean = script.iter().sum::<f64>() / script.len() as f64;
        assert!((mean - want).abs() < 1e-9, "{name}: scripted oracle {mean} vs hand value {want}");
    }
}

#[test]
fn ap_matches_scripted_oracle_on_random_scenes() {
    let mut r = rng(5);
    for _ in 0..50 {
        let images = r.gen_range(1..4);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..images {
            let g: Vec<_> = (0..r.gen_range(1..5))
                .map(|_| gt(random_box(&mut r, 80.0, 4.0).to_array(), r.gen_range(0..2)))
                .collect();
            let d: Vec<_> = (0..r.gen_range(0..8))
                .map(|_| {
                    let b = if r.gen_bool(0.6) && !g.is_empty() {
                        let t = g[r.gen_range(0..g.len())].bbox;
                        let j = r.gen_range(-2.0..2.0);
                        [t.x1 + j, t.y1 + j, t.x2 + j, t.y2 + j]
                    } else {
                        random_box(&mut r, 80.0, 4.0).to_array()
                    };
                    det(b, r.gen_range(0..2), r.gen::<f64>())
                })
                .collect();
            gts.push(g);
            dets.push(d);
        }
        let rep = ap_eval(&dets, &gts, &EvalConfig::default()).unwrap();
        let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
        let mut per = Vec::new();
        for c in 0..2 {
            for &t in &thresholds {
                if let Some(v) = ap_reference(&dets, &gts, c, t) {
                    per.push(v);
                }
            }
        }
        let want = per.iter().sum::<f64>() / per.len() as f64;
        assert!((rep.ap - want).abs() < 1e-9, "{} vs {want}", rep.ap);
    }
}

#[test]
fn iou_matches_rasterization() {
    let v = iou(&BoxXYXY::new(0.0, 0.0, 2.0, 2.0), &BoxXYXY::new(1.0, 1.0, 3.0, 3.0));
    let raster = raster_iou([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0], 200);
    assert!((v - 1.0 / 7.0).abs() < 1e-12);
    assert!((v - raster).abs() < 1e-3, "{v} vs {raster}");
    let mut r = rng(6);
    for _ in 0..20 {
        let a = random_box(&mut r, 8.0, 0.5);
        let b = random_box(&mut r, 8.0, 0.5);
        let raster = raster_iou(a.to_array(), b.to_array(), 400);
        assert!((iou(&a, &b) - raster).abs() < 1e-2, "{a:?} {b:?}");
    }
}

#[test]
fn giou_matches_definition() {
    let cases = [
        ([0.0, 0.0, 1.0, 1.0], [2.0, 0.0, 3.0, 1.0], -1.0 / 3.0),
        ([0.0, 0.0, 1.0, 1.0], [9.0, 0.0, 10.0, 1.0], -0.8),
        ([0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 2.0, 2.0], 1.0),
    ];
    for (a, b, want) in cases {
        let got = giou(&BoxXYXY::new(a[0], a[1], a[2], a[3]), &BoxXYXY::new(b[0], b[1], b[2], b[3]));
        assert!((got - want).abs() < 1e-9, "{a:?} {b:?}: {got}");
        assert!((giou_definition(a, b) - want).abs() < 1e-12);
    }
    let mut r = rng(7);
    for _ in 0..1000 {
        let a = random_box(&mut r, 50.0, 0.5);
        let b = random_box(&mut r, 50.0, 0.5);
        assert!((giou(&a, &b) - giou_definition(a.to_array(), b.to_array())).abs() < 1e-9);
    }
}

#[test]
fn encode_decode_roundtrip_on_random_pairs() {
    let mut r = rng(8);
    let image = ImageSize::new(1000, 1000);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let target = random_box(&mut r, 1000.0, 1.0);
        let anchor = random_box(&mut r, 1000.0, 16.0);
        let d = encode_box(&target, &anchor).unwrap();
        let back = decode_box(&d, &anchor, image);
        for (x, y) in back.to_array().iter().zip(target.to_array()) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst <= 1e-9, "worst roundtrip error {worst}");
}

#[test]
fn encode_decode_worked_examples() {
    let anchor = BoxXYXY::new(0.0, 0.0, 2.0, 2.0);
    let d = encode_box(&BoxXYXY::new(0.0, 0.0, 4.0, 4.0), &anchor).unwrap().to_array();
    let want = [0.5, 0.5, 2f64.ln(), 2f64.ln()];
    for (a, b) in d.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Pyramid shapes of a 128×128 image over strides 8, 16, 32.
fn desk_levels() -> Vec<LevelShape> {
    [8, 16, 32]
        .iter()
        .map(|&s| LevelShape {
            h: 128 / s,
            w: 128 / s,
            stride: s,
        })
        .collect()
}

#[test]
fn anchor_counts_and_areas_per_type_table() {
    let levels = desk_levels();
    let cells: usize = levels.iter().map(|l| l.h * l.w).sum();
    for (sizes, ratios) in [(1, 1), (1, 3), (3, 1), (3, 3)] {
        let cfg = AnchorConfig::grid(sizes, ratios);
        let set = AnchorSet::generate(&levels, &cfg).unwrap();
        assert_eq!(set.len(), cells * sizes * ratios);
        let scales: Vec<f64> = (0..sizes).map(|i| 2f64.powf(i as f64 / 3.0)).collect();
        for flat in 0..set.len() {
            let idx = set.locate(flat);
            assert_eq!(set.flat_index(idx), flat);
            let lv = levels[idx.level];
            let base = 4.0 * lv.stride as f64;
            let s = scales[idx.kind / ratios];
            let b = set.get(flat);
            let want = (base * s).powi(2);
            assert!((b.area() - want).abs() / want < 1e-6, "{sizes}x{ratios} flat {flat}");
            let c = b.to_cwh();
            assert!((c.cx - (idx.x as f64 + 0.5) * lv.stride as f64).abs() < 1e-9);
            assert!((c.cy - (idx.y as f64 + 0.5) * lv.stride as f64).abs() < 1e-9);
        }
    }
    let mut r = rng(9);
    for types in 1..=9 {
        let scales: Vec<f64> = (0..types).map(|_| r.gen_range(0.5..2.0)).collect();
        let cfg = AnchorConfig {
            scales: scales.clone(),
            ratios: vec![r.gen_range(0.25..4.0)],
            base_multiplier: 4.0,
        };
        let set = AnchorSet::generate(&[LevelShape { h: 4, w: 4, stride: 8 }, LevelShape { h: 2, w: 2, stride: 16 }, LevelShape { h: 1, w: 1, stride: 32 }], &cfg).unwrap();
        assert_eq!(set.len(), 21 * types);
        for flat in 0..set.len() {
            let idx = set.locate(flat);
            let base = 4.0 * [8.0, 16.0, 32.0][idx.level];
            let want = (base * scales[idx.kind]).powi(2);
            assert!((set.get(flat).area() - want).abs() / want < 1e-6);
        }
    }
}

#[test]
fn anchor_worked_examples() {
    let set = AnchorSet::generate(
        &[LevelShape { h: 1, w: 1, stride: 8 }],
        &AnchorConfig {
            scales: vec![1.0],
            ratios: vec![1.0],
            base_multiplier: 4.0,
        },
    )
    .unwrap();
    assert_eq!(set.get(0), BoxXYXY::new(-12.0, -12.0, 20.0, 20.0));
    let levels = [
        LevelShape { h: 4, w: 4, stride: 8 },
        LevelShape { h: 2, w: 2, stride: 16 },
        LevelShape { h: 1, w: 1, stride: 32 },
    ];
    assert_eq!(AnchorSet::generate(&levels, &AnchorConfig::default()).unwrap().len(), 189);
}
