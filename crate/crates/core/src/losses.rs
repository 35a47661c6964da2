//! Selection, classification and box-regression losses on the tape.

use crate::error::{Error, Result};
use crate::evalkit::GroundTruth;
use crate::geometry::{encode_box, max_log_scale, BoxCWH};
use crate::matching::{Label, MatchResult};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "focal alpha must lie in [0, 1] and gamma be non-negative, got {} / {}",
                self.alpha, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    /// Classification and L1 only.
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            l1: 1.0,
            giou: 0.0,
        }
    }
}

impl LossWeights {
    /// Weights used when the GIoU term is switched on.
    pub fn with_giou() -> Self {
        LossWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.cls, self.l1, self.giou];
        if w.iter().any(|v| !(*v >= 0.0)) || w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with at least one positive, got {w:?}"
            )));
        }
        Ok(())
    }
}

/// Element-wise sigmoid focal loss.
pub fn sigmoid_focal_loss(t: &mut Tape, logits: Var, targets: &[f64], p: FocalParams) -> Result<Var> {
    t.sigmoid_focal(logits, targets, p.alpha, p.gamma)
}

fn normalizer(positives: usize) -> f64 {
    positives.max(1) as f64
}

/// Σ|pred − target| over `[P, 4]` deltas divided by `norm`; exactly 0 for
/// an empty set.
pub fn l1_box_loss(t: &mut Tape, pred: Option<Var>, target: &[[f64; 4]], norm: f64) -> Result<Var> {
    let Some(pred) = pred else { return Ok(t.scalar(0.0)) };
    let tgt = t.constant(Tensor::new(&[target.len(), 4], target.concat())?);
    let d = t.sub(pred, tgt)?;
    let a = t.abs(d);
    let s = t.sum_all(a);
    Ok(t.scale(s, 1.0 / norm))
}

/// Differentiable delta decode of `[P, 4]` deltas against reference boxes,
/// returning `[P, 4]` corner boxes. Log-scales are clamped from above and
/// the result is not clipped to the image.
pub fn decode_on_tape(t: &mut Tape, deltas: Var, refs: &[BoxCWH]) -> Result<Var> {
    let p = refs.len();
    let ctr: Vec<f64> = refs.iter().flat_map(|r| [r.cx, r.cy]).collect();
    let size: Vec<f64> = refs.iter().flat_map(|r| [r.w, r.h]).collect();
    let ctr = t.constant(Tensor::new(&[p, 2], ctr)?);
    let size = t.constant(Tensor::new(&[p, 2], size)?);
    let txy = t.narrow(deltas, 1, 0, 2)?;
    let twh = t.narrow(deltas, 1, 2, 2)?;
    let c = t.mul(txy, size)?;
    let c = t.add(c, ctr)?;
    let twh = t.clamp_max(twh, max_log_scale());
    let e = t.exp(twh);
    let wh = t.mul(e, size)?;
    let half = t.scale(wh, 0.5);
    let lo = t.sub(c, half)?;
    let hi = t.add(c, half)?;
    t.concat(&[lo, hi], 1)
}

fn col(t: &mut Tape, x: Var, i: usize) -> Result<Var> {
    t.narrow(x, 1, i, 1)
}

fn area(t: &mut Tape, lo: Var, hi: Var) -> Result<Var> {
    let wh = t.sub(hi, lo)?;
    let w = col(t, wh, 0)?;
    let h = col(t, wh, 1)?;
    t.mul(w, h)
}

/// GIoU between `[P, 4]` corner boxes on the tape and constant targets,
/// shape `[P, 1]`.
pub fn giou_on_tape(t: &mut Tape, pred: Var, target: &[[f64; 4]]) -> Result<Var> {
    let p = target.len();
    let tgt = t.constant(Tensor::new(&[p, 4], target.concat())?);
    let p1 = t.narrow(pred, 1, 0, 2)?;
    let p2 = t.narrow(pred, 1, 2, 2)?;
    let t1 = t.narrow(tgt, 1, 0, 2)?;
    let t2 = t.narrow(tgt, 1, 2, 2)?;
    let lt = t.maximum(p1, t1)?;
    let rb = t.minimum(p2, t2)?;
    let wh = t.sub(rb, lt)?;
    let wh = t.clamp_min(wh, 0.0);
    let iw = col(t, wh, 0)?;
    let ih = col(t, wh, 1)?;
    let inter = t.mul(iw, ih)?;
    let ap = area(t, p1, p2)?;
    let at = area(t, t1, t2)?;
    let union = t.add(ap, at)?;
    let union = t.sub(union, inter)?;
    let iou = t.div(inter, union)?;
    let hlo = t.minimum(p1, t1)?;
    let hhi = t.maximum(p2, t2)?;
    let hull = area(t, hlo, hhi)?;
    let gap = t.sub(hull, union)?;
    let frac = t.div(gap, hull)?;
    t.sub(iou, frac)
}

/// Σ(1 − GIoU) over positives divided by `norm`; exactly 0 for an empty set.
pub fn giou_loss(t: &mut Tape, pred: Option<Var>, target: &[[f64; 4]], norm: f64) -> Result<Var> {
    let Some(pred) = pred else { return Ok(t.scalar(0.0)) };
    let g = giou_on_tape(t, pred, target)?;
    let s = t.sum_all(g);
    let n = target.len() as f64;
    let s = t.neg(s);
    let s = t.add_scalar(s, n);
    Ok(t.scale(s, 1.0 / norm))
}

/// Focal loss over all feature-anchor scores against Stage-1 matches,
/// normalized by the number of positives.
pub fn selection_loss(t: &mut Tape, scores: Var, matches: &MatchResult, focal: FocalParams) -> Result<Var> {
    let n = t.value(scores).numel();
    if matches.labels.len() != n {
        return Err(Error::invalid(
            "selection_loss",
            format!("{n} scores but {} match labels", matches.labels.len()),
        ));
    }
    let mut targets = vec![0.0; n];
    let mut mask = vec![1.0; n];
    for (i, l) in matches.labels.iter().enumerate() {
        match l {
            Label::Positive(_) => targets[i] = 1.0,
            Label::Negative => {}
            Label::Ignore => mask[i] = 0.0,
        }
    }
    let fl = sigmoid_focal_loss(t, scores, &targets, focal)?;
    let fl = masked_sum(t, fl, &mask)?;
    Ok(t.scale(fl, 1.0 / normalizer(matches.num_positives())))
}

fn masked_sum(t: &mut Tape, x: Var, mask: &[f64]) -> Result<Var> {
    if mask.iter().all(|&m| m == 1.0) {
        return Ok(t.sum_all(x));
    }
    let shape = t.shape(x).to_vec();
    let m = t.constant(Tensor::new(&shape, mask.to_vec())?);
    let y = t.mul(x, m)?;
    Ok(t.sum_all(y))
}

/// One set of per-query predictions (one decoder layer).
#[derive(Clone, Debug)]
pub struct PredictionSet {
    /// `[Q, C + 1]`, non-object last.
    pub logits: Var,
    /// `[Q, 4]` deltas relative to `refs`.
    pub deltas: Var,
    /// Reference box of every query for this set.
    pub refs: Vec<BoxCWH>,
    pub matches: MatchResult,
}

/// Scalar loss terms of one image.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub selection: Var,
    pub cls: Var,
    pub l1: Var,
    pub giou: Var,
    pub total: Var,
}

/// Plain values of [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub selection: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values(&self, t: &Tape) -> LossValues {
        LossValues {
            selection: t.value(self.selection).item(),
            cls: t.value(self.cls).item(),
            l1: t.value(self.l1).item(),
            giou: t.value(self.giou).item(),
            total: t.value(self.total).item(),
        }
    }
}

impl std::ops::AddAssign for LossValues {
    fn add_assign(&mut self, o: Self) {
        self.selection += o.selection;
        self.cls += o.cls;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.total += o.total;
    }
}

/// Classification, L1 and GIoU terms of one prediction set. The L1 terms
/// are skipped (exact 0) when their weight is 0.
pub fn stage2_terms(
    t: &mut Tape,
    set: &PredictionSet,
    gts: &[GroundTruth],
    num_classes: usize,
    focal: FocalParams,
    weights: LossWeights,
) -> Result<(Var, Var, Var)> {
    let q = set.refs.len();
    let c1 = num_classes + 1;
    if t.shape(set.logits) != [q, c1] || t.shape(set.deltas) != [q, 4] || set.matches.labels.len() != q {
        return Err(Error::invalid(
            "stage2_losses",
            format!(
                "logits {:?}, deltas {:?}, {} labels for {q} queries",
                t.shape(set.logits),
                t.shape(set.deltas),
                set.matches.labels.len()
            ),
        ));
    }
    let mut targets = vec![0.0; q * c1];
    let mut mask = vec![1.0; q * c1];
    let mut pos_rows = Vec::new();
    let mut pos_gts = Vec::new();
    for (i, l) in set.matches.labels.iter().enumerate() {
        match *l {
            Label::Positive(g) => {
                let gt = gts.get(g).ok_or_else(|| {
                    Error::invalid("stage2_losses", format!("match to ground truth {g} of {}", gts.len()))
                })?;
                if gt.class_id >= num_classes {
                    return Err(Error::invalid(
                        "stage2_losses",
                        format!("class {} with {num_classes} classes", gt.class_id),
                    ));
                }
                targets[i * c1 + gt.class_id] = 1.0;
                pos_rows.push(i);
                pos_gts.push(gt);
            }
            Label::Negative => targets[i * c1 + num_classes] = 1.0,
            Label::Ignore => mask[i * c1..(i + 1) * c1].fill(0.0),
        }
    }
    let norm = normalizer(pos_rows.len());
    let fl = sigmoid_focal_loss(t, set.logits, &targets, focal)?;
    let cls = masked_sum(t, fl, &mask)?;
    let cls = t.scale(cls, 1.0 / norm);

    let pred = if pos_rows.is_empty() {
        None
    } else {
        Some(t.index_select(set.deltas, &pos_rows)?)
    };
    let l1 = if weights.l1 > 0.0 {
        let tgt = pos_rows
            .iter()
            .zip(&pos_gts)
            .map(|(&i, gt)| encode_box(&gt.bbox, &set.refs[i].to_xyxy()).map(|d| d.to_array()))
            .collect::<Result<Vec<_>>>()?;
        l1_box_loss(t, pred, &tgt, norm)?
    } else {
        t.scalar(0.0)
    };
    let giou = match pred {
        Some(pred) if weights.giou > 0.0 => {
            let refs: Vec<BoxCWH> = pos_rows.iter().map(|&i| set.refs[i]).collect();
            let boxes = decode_on_tape(t, pred, &refs)?;
            let tgt: Vec<[f64; 4]> = pos_gts.iter().map(|g| g.bbox.to_array()).collect();
            giou_loss(t, Some(boxes), &tgt, norm)?
        }
        _ => t.scalar(0.0),
    };
    Ok((cls, l1, giou))
}

/// Selection loss plus the weighted Stage-2 terms summed over every
/// prediction set (one set without auxiliary losses, one per decoder layer
/// with them).
pub fn assemble_losses(
    t: &mut Tape,
    scores: Var,
    stage1: &MatchResult,
    sets: &[PredictionSet],
    gts: &[GroundTruth],
    num_classes: usize,
    focal: FocalParams,
    weights: LossWeights,
) -> Result<LossTerms> {
    if sets.is_empty() {
        return Err(Error::invalid("assemble_losses", "no prediction sets"));
    }
    let selection = selection_loss(t, scores, stage1, focal)?;
    let mut cls = Vec::new();
    let mut l1 = Vec::new();
    let mut giou = Vec::new();
    for s in sets {
        let (c, l, g) = stage2_terms(t, s, gts, num_classes, focal, weights)?;
        cls.push(c);
        l1.push(l);
        giou.push(g);
    }
    let cls = sum_scalars(t, &cls)?;
    let l1 = sum_scalars(t, &l1)?;
    let giou = sum_scalars(t, &giou)?;
    let wc = t.scale(cls, weights.cls);
    let wl = t.scale(l1, weights.l1);
    let wg = t.scale(giou, weights.giou);
    let total = t.add(selection, wc)?;
    let total = t.add(total, wl)?;
    let total = t.add(total, wg)?;
    Ok(LossTerms {
        selection,
        cls,
        l1,
        giou,
        total,
    })
}

fn sum_scalars(t: &mut Tape, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = t.add(acc, x)?;
    }
    Ok(acc)
}
