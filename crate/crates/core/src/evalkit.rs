//! Non-maximum suppression, the two inference strategies, and a COCO-style
//! average-precision evaluator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_box, iou, BoxDelta, BoxXYXY, ImageSize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxXYXY,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BoxXYXY,
    pub class_id: usize,
}

/// Indices sorted by descending score, lower index first on ties.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Greedy suppression: walking boxes by descending score, a box is dropped
/// when its IoU with any kept box exceeds `threshold`. Returns the kept
/// indices in the order they were kept.
pub fn nms(boxes: &[BoxXYXY], scores: &[f64], threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut keep: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= threshold) {
            keep.push(i);
        }
    }
    keep
}

/// NMS run independently per class over `dets`; returns survivors sorted
/// by descending score.
pub fn nms_per_class(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let num_classes = dets.iter().map(|d| d.class_id + 1).max().unwrap_or(0);
    let mut out = Vec::new();
    for c in 0..num_classes {
        let members: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == c).collect();
        let boxes: Vec<BoxXYXY> = members.iter().map(|&i| dets[i].bbox).collect();
        let scores: Vec<f64> = members.iter().map(|&i| dets[i].score).collect();
        out.extend(nms(&boxes, &scores, threshold).into_iter().map(|k| members[k]));
    }
    out.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    out.into_iter().map(|i| dets[i]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// One label per box: the highest-scoring object class.
    Old,
    /// Every object class of every box enters NMS as its own candidate.
    New,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "old" => Ok(Strategy::Old),
            "new" => Ok(Strategy::New),
            _ => Err(Error::Config(format!("unknown inference strategy `{s}`"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Old => "old",
            Strategy::New => "new",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferConfig {
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            nms_threshold: 0.5,
            max_detections: 100,
        }
    }
}

/// Raw per-query head outputs for one image.
///
/// `logits` is `Q × (C + 1)` row-major with the non-object logit last.
#[derive(Clone, Debug)]
pub struct HeadOutput<'a> {
    pub logits: &'a [f64],
    pub deltas: &'a [[f64; 4]],
    pub anchors: &'a [BoxXYXY],
    pub num_classes: usize,
    pub image: ImageSize,
}

impl HeadOutput<'_> {
    fn check(&self) -> Result<()> {
        let q = self.anchors.len();
        if self.deltas.len() != q || self.logits.len() != q * (self.num_classes + 1) {
            return Err(Error::invalid(
                "inference",
                format!(
                    "{} anchors, {} deltas, {} logits for {} classes",
                    q,
                    self.deltas.len(),
                    self.logits.len(),
                    self.num_classes
                ),
            ));
        }
        Ok(())
    }

    fn class_scores(&self, q: usize) -> &[f64] {
        &self.logits[q * (self.num_classes + 1)..][..self.num_classes]
    }

    fn decoded(&self, q: usize) -> BoxXYXY {
        decode_box(&BoxDelta::from_array(self.deltas[q]), &self.anchors[q], self.image)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-query argmax candidates, before NMS.
pub fn candidates_old(out: &HeadOutput) -> Result<Vec<Detection>> {
    out.check()?;
    Ok((0..out.anchors.len())
        .map(|q| {
            let row = out.class_scores(q);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            Detection {
                bbox: out.decoded(q),
                class_id: best,
                score: sigmoid(row[best]),
            }
        })
        .collect())
}

/// One candidate per (query, object class), before NMS.
pub fn candidates_new(out: &HeadOutput) -> Result<Vec<Detection>> {
    out.check()?;
    let mut v = Vec::with_capacity(out.anchors.len() * out.num_classes);
    for q in 0..out.anchors.len() {
        let bbox = out.decoded(q);
        for (c, &l) in out.class_scores(q).iter().enumerate() {
            v.push(Detection {
                bbox,
                class_id: c,
                score: sigmoid(l),
            });
        }
    }
    Ok(v)
}

fn finish(cands: Vec<Detection>, cfg: &InferConfig) -> Vec<Detection> {
    let mut kept = nms_per_class(&cands, cfg.nms_threshold);
    kept.truncate(cfg.max_detections);
    kept
}

pub fn infer_old(out: &HeadOutput, cfg: &InferConfig) -> Result<Vec<Detection>> {
    Ok(finish(candidates_old(out)?, cfg))
}

pub fn infer_new(out: &HeadOutput, cfg: &InferConfig) -> Result<Vec<Detection>> {
    Ok(finish(candidates_new(out)?, cfg))
}

pub fn infer(out: &HeadOutput, strategy: Strategy, cfg: &InferConfig) -> Result<Vec<Detection>> {
    match strategy {
        Strategy::Old => infer_old(out, cfg),
        Strategy::New => infer_new(out, cfg),
    }
}

/// Object-area range in square pixels, `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AreaRange {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
}

pub const AREA_SMALL: AreaRange = AreaRange {
    name: "small",
    lo: 0.0,
    hi: 32.0 * 32.0,
};
pub const AREA_MEDIUM: AreaRange = AreaRange {
    name: "medium",
    lo: 32.0 * 32.0,
    hi: 96.0 * 96.0,
};
pub const AREA_LARGE: AreaRange = AreaRange {
    name: "large",
    lo: 96.0 * 96.0,
    hi: f64::INFINITY,
};

impl AreaRange {
    fn contains(&self, area: f64) -> bool {
        area >= self.lo && area < self.hi
    }
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_detections: usize,
    /// Extra per-bucket AP; empty by default.
    pub area_ranges: Vec<AreaRange>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            max_detections: 100,
            area_ranges: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `(bucket name, AP)` for each requested area range.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub by_area: Vec<(String, f64)>,
}

/// 101-point interpolated AP of one class at one IoU threshold, or `None`
/// when the class has no (non-ignored) ground truth.
fn class_ap(
    dets: &[Vec<&Detection>],
    gts: &[Vec<&GroundTruth>],
    thr: f64,
    range: Option<AreaRange>,
) -> Option<f64> {
    let in_range = |b: &BoxXYXY| range.map_or(true, |r| r.contains(b.area()));
    let mut npos = 0usize;
    // (score, is_tp, ignored)
    let mut records: Vec<(f64, bool, bool)> = Vec::new();
    for (ds, gs) in dets.iter().zip(gts) {
        let ignore: Vec<bool> = gs.iter().map(|g| !in_range(&g.bbox)).collect();
        npos += ignore.iter().filter(|i| !**i).count();
        let mut taken = vec![false; gs.len()];
        for d in ds {
            // Prefer a real ground truth; fall back to an ignored one.
            let mut found = None;
            for want_ignored in [false, true] {
                let mut best = thr;
                for (g, gt) in gs.iter().enumerate() {
                    if taken[g] || ignore[g] != want_ignored {
                        continue;
                    }
                    let v = iou(&d.bbox, &gt.bbox);
                    if v >= best && found.map_or(true, |(_, bv)| v > bv) {
                        best = v;
                        found = Some((g, v));
                    }
                }
                if found.is_some() {
                    break;
                }
            }
            match found {
                Some((g, _)) => {
                    taken[g] = true;
                    records.push((d.score, !ignore[g], ignore[g]));
                }
                None => records.push((d.score, false, !in_range(&d.bbox))),
            }
        }
    }
    if npos == 0 {
        return None;
    }
    // Stable sort keeps image order among equal scores.
    records.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for &(_, is_tp, ignored) in &records {
        if ignored {
            continue;
        }
        if is_tp {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / npos as f64);
        precision.push(tp / (tp + fp));
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

/// Mean AP over IoU thresholds and classes that have ground truth.
fn mean_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    thresholds: &[f64],
    num_classes: usize,
    range: Option<AreaRange>,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..num_classes {
        let cd: Vec<Vec<&Detection>> = dets
            .iter()
            .map(|ds| ds.iter().filter(|d| d.class_id == c).collect())
            .collect();
        let cg: Vec<Vec<&GroundTruth>> = gts
            .iter()
            .map(|gs| gs.iter().filter(|g| g.class_id == c).collect())
            .collect();
        for &t in thresholds {
            if let Some(ap) = class_ap(&cd, &cg, t, range) {
                sum += ap;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// COCO-protocol AP over per-image detections and ground truths.
///
/// Each image keeps at most `max_detections` detections (highest scores).
/// Buckets without ground truth report −1, as the reference tool does.
pub fn ap_eval(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], cfg: &EvalConfig) -> Result<ApReport> {
    if dets.len() != gts.len() {
        return Err(Error::invalid(
            "ap_eval",
            format!("{} detection lists for {} images", dets.len(), gts.len()),
        ));
    }
    if gts.iter().all(|g| g.is_empty()) {
        return Err(Error::invalid("ap_eval", "no ground truth in any image; AP is undefined"));
    }
    let num_classes = gts
        .iter()
        .flatten()
        .map(|g| g.class_id + 1)
        .chain(dets.iter().flatten().map(|d| d.class_id + 1))
        .max()
        .unwrap_or(0);
    let dets: Vec<Vec<Detection>> = dets
        .iter()
        .map(|ds| {
            let mut ds = ds.clone();
            ds.sort_by(|a, b| b.score.total_cmp(&a.score));
            ds.truncate(cfg.max_detections);
            ds
        })
        .collect();
    let at = |t: f64| mean_ap(&dets, gts, &[t], num_classes, None).unwrap_or(0.0);
    let ap = mean_ap(&dets, gts, &cfg.iou_thresholds, num_classes, None).unwrap_or(0.0);
    let by_area = cfg
        .area_ranges
        .iter()
        .map(|r| {
            let v = mean_ap(&dets, gts, &cfg.iou_thresholds, num_classes, Some(*r)).unwrap_or(-1.0);
            (r.name.to_string(), v)
        })
        .collect();
    Ok(ApReport {
        ap,
        ap50: at(0.5),
        ap75: at(0.75),
        by_area,
    })
}

/// One COCO results record; `bbox` is `[x, y, w, h]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Converts detections to COCO results records, mapping contiguous class
/// ids back through `category_ids`.
pub fn to_coco_results(image_id: u64, dets: &[Detection], category_ids: &[u64]) -> Result<Vec<CocoResult>> {
    dets.iter()
        .map(|d| {
            let category_id = *category_ids.get(d.class_id).ok_or_else(|| {
                Error::invalid("to_coco_results", format!("class {} has no category id", d.class_id))
            })?;
            Ok(CocoResult {
                image_id,
                category_id,
                bbox: [d.bbox.x1, d.bbox.y1, d.bbox.width(), d.bbox.height()],
                score: d.score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxXYXY {
        BoxXYXY::new(x1, y1, x2, y2)
    }

    fn det(bbox: BoxXYXY, score: f64) -> Detection {
        Detection {
            bbox,
            class_id: 0,
            score,
        }
    }

    #[test]
    fn nms_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[a, a], &[0.9, 0.8], 0.5), vec![0]);
        assert_eq!(nms(&[a, b(20.0, 0.0, 30.0, 10.0)], &[0.9, 0.8], 0.5), vec![0, 1]);
        // Chain: A–B and B–C at IoU 0.6. Jaccard distance is a metric, so
        // A–C cannot drop below 0.2; this layout reaches that bound.
        let boxes = [b(0.0, 0.0, 6.0, 10.0), b(0.0, 0.0, 10.0, 10.0), b(4.0, 0.0, 10.0, 10.0)];
        assert!((iou(&boxes[0], &boxes[1]) - 0.6).abs() < 1e-12);
        assert!((iou(&boxes[1], &boxes[2]) - 0.6).abs() < 1e-12);
        assert!((iou(&boxes[0], &boxes[2]) - 0.2).abs() < 1e-12);
        assert_eq!(nms(&boxes, &[0.9, 0.8, 0.7], 0.5), vec![0, 2]);
    }

    #[test]
    fn ap_exact_detection() {
        let g = b(10.0, 10.0, 50.0, 50.0);
        let gts = vec![vec![GroundTruth { bbox: g, class_id: 0 }]];
        let r = ap_eval(&[vec![det(g, 0.9)]], &gts, &EvalConfig::default()).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
        let r = ap_eval(&[vec![]], &gts, &EvalConfig::default()).unwrap();
        assert_eq!(r.ap, 0.0);
    }

    #[test]
    fn ap_fp_then_tp() {
        let g = b(10.0, 10.0, 50.0, 50.0);
        let gts = vec![vec![GroundTruth { bbox: g, class_id: 0 }]];
        let cfg = EvalConfig {
            iou_thresholds: vec![0.5],
            ..EvalConfig::default()
        };
        let dets = vec![vec![det(b(60.0, 60.0, 90.0, 90.0), 0.9), det(g, 0.8)]];
        let r = ap_eval(&dets, &gts, &cfg).unwrap();
        assert!((r.ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ap_requires_ground_truth() {
        assert!(ap_eval(&[vec![]], &[vec![]], &EvalConfig::default()).is_err());
    }

    #[test]
    fn new_strategy_with_one_class_matches_old() {
        let anchors = [b(0.0, 0.0, 10.0, 10.0), b(1.0, 1.0, 11.0, 11.0), b(40.0, 40.0, 60.0, 60.0)];
        let deltas = [[0.0; 4]; 3];
        let logits = [2.0, -1.0, 1.0, 0.0, 0.5, 3.0];
        let out = HeadOutput {
            logits: &logits,
            deltas: &deltas,
            anchors: &anchors,
            num_classes: 1,
            image: ImageSize::new(64, 64),
        };
        let cfg = InferConfig::default();
        let old = infer_old(&out, &cfg).unwrap();
        assert_eq!(old, infer_new(&out, &cfg).unwrap());
        assert_eq!(old.len(), 2);
    }

    #[test]
    fn new_strategy_keeps_both_classes() {
        let anchors = [b(0.0, 0.0, 10.0, 10.0)];
        let logits = [1.0, 0.99, -3.0];
        let out = HeadOutput {
            logits: &logits,
            deltas: &[[0.0; 4]],
            anchors: &anchors,
            num_classes: 2,
            image: ImageSize::new(64, 64),
        };
        let cfg = InferConfig::default();
        assert_eq!(infer_old(&out, &cfg).unwrap().len(), 1);
        assert_eq!(candidates_new(&out).unwrap().len(), 2);
        assert_eq!(infer_new(&out, &cfg).unwrap().len(), 2);
    }

    #[test]
    fn coco_export() {
        let d = det(b(1.0, 2.0, 4.0, 8.0), 0.5);
        let r = to_coco_results(7, &[d], &[3]).unwrap();
        assert_eq!(r[0].bbox, [1.0, 2.0, 3.0, 6.0]);
        assert_eq!(r[0].category_id, 3);
    }
}
