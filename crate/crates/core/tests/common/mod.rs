//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls the library routine it checks.
#![allow(dead_code)]

use fqdet::evalkit::{Detection, GroundTruth};
use fqdet::geometry::BoxXYXY;
use fqdet::matching::Label;
use rand::Rng;

/// Random box with corners inside `[0, extent]` and both sides ≥ `min_side`.
pub fn random_box<R: Rng>(rng: &mut R, extent: f64, min_side: f64) -> BoxXYXY {
    let w = rng.gen_range(min_side..extent / 2.0);
    let h = rng.gen_range(min_side..extent / 2.0);
    let x1 = rng.gen_range(0.0..extent - w);
    let y1 = rng.gen_range(0.0..extent - h);
    BoxXYXY::new(x1, y1, x1 + w, y1 + h)
}

/// IoU by counting sample points of a `cells × cells` grid per unit length
/// over the joint bounding region.
pub fn raster_iou(a: [f64; 4], b: [f64; 4], cells: usize) -> f64 {
    let (x0, y0) = (a[0].min(b[0]), a[1].min(b[1]));
    let (x1, y1) = (a[2].max(b[2]), a[3].max(b[3]));
    let nx = ((x1 - x0) * cells as f64).ceil() as usize;
    let ny = ((y1 - y0) * cells as f64).ceil() as usize;
    let inside = |r: [f64; 4], x: f64, y: f64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0u64, 0u64);
    for j in 0..ny {
        let y = y0 + (j as f64 + 0.5) / cells as f64;
        for i in 0..nx {
            let x = x0 + (i as f64 + 0.5) / cells as f64;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// GIoU straight from its definition with areas from side products.
pub fn giou_definition(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (hull - union) / hull
}

fn overlap(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Top-k by full sort of each row, then the conflict rule over all claims.
pub fn top_k_oracle(iou: &[Vec<f64>], n: usize, k: usize) -> Vec<Label> {
    let mut claims: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (g, row) in iou.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        for &c in order.iter().take(k) {
            if row[c] > 0.0 {
                claims[c].push((g, row[c]));
            }
        }
    }
    claims
        .into_iter()
        .map(|cs| {
            cs.into_iter()
                .reduce(|best, x| if x.1 > best.1 || (x.1 == best.1 && x.0 < best.0) { x } else { best })
                .map_or(Label::Negative, |(g, _)| Label::Positive(g))
        })
        .collect()
}

/// Threshold labels plus the forced best candidate of every ground truth.
pub fn absolute_oracle(iou: &[Vec<f64>], n: usize, pos: f64, neg: f64) -> Vec<Label> {
    let argmax_gt = |c: usize| {
        let mut best = (0, f64::NEG_INFINITY);
        for (g, row) in iou.iter().enumerate() {
            if row[c] > best.1 {
                best = (g, row[c]);
            }
        }
        best
    };
    let mut labels: Vec<Label> = (0..n)
        .map(|c| {
            let (g, v) = argmax_gt(c);
            if v >= pos {
                Label::Positive(g)
            } else if v < neg {
                Label::Negative
            } else {
                Label::Ignore
            }
        })
        .collect();
    for row in iou {
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if top > 0.0 {
            let c = row.iter().position(|&v| v == top).unwrap();
            labels[c] = Label::Positive(argmax_gt(c).0);
        }
    }
    labels
}

/// Minimum total over every injective row → column map, summed in row order.
pub fn assignment_brute_force(cost: &[Vec<f64>], cols: usize) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cols], 0.0, &mut best);
    best
}

/// Quadratic greedy suppression over an explicit suppressed mask.
pub fn nms_reference(boxes: &[BoxXYXY], scores: &[f64], thr: f64) -> Vec<usize> {
    let n = boxes.len();
    let mut alive = vec![true; n];
    let mut keep = Vec::new();
    loop {
        let mut pick: Option<usize> = None;
        for i in 0..n {
            if alive[i] && pick.map_or(true, |p| scores[i] > scores[p]) {
                pick = Some(i);
            }
        }
        let Some(p) = pick else { break };
        keep.push(p);
        alive[p] = false;
        for i in 0..n {
            if alive[i] && overlap(&boxes[p], &boxes[i]) > thr {
                alive[i] = false;
            }
        }
    }
    keep
}

/// 101-point interpolated AP of one class at one threshold, following the
/// accumulate-then-envelope recipe step by step.
pub fn ap_reference(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class: usize, thr: f64) -> Option<f64> {
    let total: usize = gts.iter().map(|g| g.iter().filter(|x| x.class_id == class).count()).sum();
    if total == 0 {
        return None;
    }
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        for (i, d) in ds.iter().enumerate() {
            if d.class_id == class {
                all.push((d.score, img, i));
            }
        }
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::new();
    for (_, img, i) in all {
        let d = &dets[img][i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[img].iter().enumerate() {
            if g.class_id != class || used[img][j] {
                continue;
            }
            let v = overlap(&d.bbox, &g.bbox);
            if v >= thr && best.map_or(true, |b| v > b.1) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                used[img][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / total as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += p;
    }
    Some(sum / 101.0)
}

pub fn det(b: [f64; 4], class_id: usize, score: f64) -> Detection {
    Detection {
        bbox: BoxXYXY::new(b[0], b[1], b[2], b[3]),
        class_id,
        score,
    }
}

pub fn gt(b: [f64; 4], class_id: usize) -> GroundTruth {
    GroundTruth {
        bbox: BoxXYXY::new(b[0], b[1], b[2], b[3]),
        class_id,
    }
}

/// The three hand-evaluated precision-recall fixtures:
/// `(name, detections, ground truths, AP at IoU 0.5)`.
pub fn ap_fixtures() -> Vec<(&'static str, Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>, f64)> {
    let a = [0.0, 0.0, 10.0, 10.0];
    let b = [20.0, 20.0, 30.0, 30.0];
    let far = [50.0, 50.0, 60.0, 60.0];
    vec![
        // FP then TP: precision 0 at recall 0, then 1/2 at recall 1; the
        // envelope is 1/2 at all 101 recall points.
        (
            "fp_then_tp",
            vec![vec![det(far, 0, 0.9), det(a, 0, 0.8)]],
            vec![vec![gt(a, 0)]],
            0.5,
        ),
        // TP, FP, TP over two ground truths: precision 1 up to recall 0.5
        // (51 points), 2/3 above it (50 points).
        (
            "tp_fp_tp",
            vec![vec![det(a, 0, 0.9), det(far, 0, 0.8), det(b, 0, 0.7)]],
            vec![vec![gt(a, 0), gt(b, 0)]],
            (51.0 + 50.0 * 2.0 / 3.0) / 101.0,
        ),
        // Two images, two classes: class 0 finds one of two objects (51/101),
        // class 1 has no detections (0); mean over classes.
        (
            "two_images_two_classes",
            vec![vec![det(a, 0, 0.6)], vec![]],
            vec![vec![gt(a, 0), gt(b, 1)], vec![gt(a, 0)]],
            (51.0 / 101.0 + 0.0) / 2.0,
        ),
    ]
}
