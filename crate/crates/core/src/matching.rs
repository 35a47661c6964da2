//! Label assignment between ground truths and candidates (anchors or
//! queries): static top-k, static absolute thresholds, and one-to-one
//! Hungarian matching.

use crate::error::{Error, Result};
use crate::evalkit::GroundTruth;
use crate::geometry::{giou, BoxXYXY, ImageSize};
use crate::tensor::top_k_indices;

/// Dense row-major matrix, rows = ground truths, columns = candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(
                "matrix",
                format!("{rows}×{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..][..self.cols]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// One label per candidate.
    pub labels: Vec<Label>,
    /// Candidates assigned to each ground truth, ascending.
    pub positives: Vec<Vec<usize>>,
}

impl MatchResult {
    pub fn from_labels(labels: Vec<Label>, num_gt: usize) -> Self {
        let mut positives = vec![Vec::new(); num_gt];
        for (c, l) in labels.iter().enumerate() {
            if let Label::Positive(g) = l {
                positives[*g].push(c);
            }
        }
        MatchResult { labels, positives }
    }

    pub fn all_negative(candidates: usize) -> Self {
        MatchResult {
            labels: vec![Label::Negative; candidates],
            positives: Vec::new(),
        }
    }

    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|l| matches!(l, Label::Positive(_))).count()
    }

    /// `(candidate, gt)` pairs in candidate order.
    pub fn positive_pairs(&self) -> Vec<(usize, usize)> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(c, l)| match l {
                Label::Positive(g) => Some((c, *g)),
                _ => None,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchScheme {
    TopK,
    Absolute,
    Hungarian,
}

impl std::str::FromStr for MatchScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(MatchScheme::TopK),
            "absolute" => Ok(MatchScheme::Absolute),
            "hungarian" => Ok(MatchScheme::Hungarian),
            _ => Err(Error::Config(format!("unknown matching scheme `{s}`"))),
        }
    }
}

impl std::fmt::Display for MatchScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MatchScheme::TopK => "topk",
            MatchScheme::Absolute => "absolute",
            MatchScheme::Hungarian => "hungarian",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatcherConfig {
    pub scheme: MatchScheme,
    pub k: usize,
    pub pos_thr: f64,
    pub neg_thr: f64,
    pub cost_class: f64,
    pub cost_l1: f64,
    pub cost_giou: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            scheme: MatchScheme::TopK,
            k: 15,
            pos_thr: 0.7,
            neg_thr: 0.3,
            cost_class: 2.0,
            cost_l1: 5.0,
            cost_giou: 2.0,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("matching k must be at least 1".into()));
        }
        if !(0.0 <= self.neg_thr && self.neg_thr <= self.pos_thr && self.pos_thr <= 1.0) {
            return Err(Error::Config(format!(
                "matching thresholds must satisfy 0 ≤ neg ({}) ≤ pos ({}) ≤ 1",
                self.neg_thr, self.pos_thr
            )));
        }
        if [self.cost_class, self.cost_l1, self.cost_giou].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("hungarian cost weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Static top-k matching.
///
/// Every ground truth claims its `k` highest-IoU candidates with IoU > 0
/// (lower index first on ties). A candidate claimed by several ground
/// truths goes to the one with the higher IoU, then the lower index; the
/// losers are not refilled.
pub fn top_k_match(iou: &Matrix, k: usize) -> Result<MatchResult> {
    if k == 0 {
        return Err(Error::Config("top-k matching needs k ≥ 1".into()));
    }
    let n = iou.cols;
    if iou.rows == 0 {
        return Ok(MatchResult::all_negative(n));
    }
    // (gt, iou) of the current owner of each candidate.
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; n];
    for g in 0..iou.rows {
        let row = iou.row(g);
        for c in top_k_indices(row, k.min(n)) {
            let v = row[c];
            if !(v > 0.0) {
                break;
            }
            match owner[c] {
                Some((_, best)) if best >= v => {}
                _ => owner[c] = Some((g, v)),
            }
        }
    }
    let labels = owner
        .into_iter()
        .map(|o| o.map_or(Label::Negative, |(g, _)| Label::Positive(g)))
        .collect();
    Ok(MatchResult::from_labels(labels, iou.rows))
}

/// Threshold matching with a best-candidate fallback per ground truth.
///
/// A candidate is positive for its highest-IoU ground truth when that IoU
/// reaches `pos_thr`, negative below `neg_thr`, and ignored in between.
/// Each ground truth's best candidate (lowest index on ties) is then forced
/// positive, keeping that candidate's own highest-IoU ground truth. Ground
/// truths that overlap no candidate at all force nothing.
pub fn absolute_match(iou: &Matrix, pos_thr: f64, neg_thr: f64) -> Result<MatchResult> {
    if !(0.0 <= neg_thr && neg_thr <= pos_thr && pos_thr <= 1.0) {
        return Err(Error::Config(format!(
            "absolute matching thresholds out of order: neg {neg_thr}, pos {pos_thr}"
        )));
    }
    let n = iou.cols;
    if iou.rows == 0 {
        return Ok(MatchResult::all_negative(n));
    }
    let mut best_gt = vec![(0usize, f64::NEG_INFINITY); n];
    for g in 0..iou.rows {
        for (c, &v) in iou.row(g).iter().enumerate() {
            if v > best_gt[c].1 {
                best_gt[c] = (g, v);
            }
        }
    }
    let mut labels: Vec<Label> = best_gt
        .iter()
        .map(|&(g, v)| {
            if v >= pos_thr {
                Label::Positive(g)
            } else if v < neg_thr {
                Label::Negative
            } else {
                Label::Ignore
            }
        })
        .collect();
    for g in 0..iou.rows {
        let row = iou.row(g);
        let mut best = 0;
        for c in 1..n {
            if row[c] > row[best] {
                best = c;
            }
        }
        if n > 0 && row[best] > 0.0 {
            labels[best] = Label::Positive(best_gt[best].0);
        }
    }
    Ok(MatchResult::from_labels(labels, iou.rows))
}

/// Optimal one-to-one assignment of rows to columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Column assigned to each row.
    pub columns: Vec<usize>,
    /// Sum of the assigned costs, accumulated in row order.
    pub total: f64,
}

/// Kuhn–Munkres with row/column potentials (shortest augmenting paths),
/// `O(rows² · cols)`. Requires `cols ≥ rows`.
pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    let (n, m) = (cost.rows, cost.cols);
    if m < n {
        return Err(Error::invalid(
            "hungarian_match",
            format!("{m} queries cannot cover {n} ground truths"),
        ));
    }
    if cost.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("hungarian_match", "non-finite cost"));
    }
    if n == 0 {
        return Ok(Assignment {
            columns: Vec::new(),
            total: 0.0,
        });
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: 1-based row matched to column j (0 = free); column 0 is virtual.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut columns = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            columns[p[j] - 1] = j - 1;
        }
    }
    let total = columns.iter().enumerate().map(|(r, &c)| cost.get(r, c)).sum();
    Ok(Assignment { columns, total })
}

/// Hungarian matching of `G` ground truths to `Q` queries; unassigned
/// queries are negative.
pub fn hungarian_match(cost: &Matrix) -> Result<(MatchResult, f64)> {
    let a = hungarian(cost)?;
    let mut labels = vec![Label::Negative; cost.cols];
    for (g, &q) in a.columns.iter().enumerate() {
        labels[q] = Label::Positive(g);
    }
    Ok((MatchResult::from_labels(labels, cost.rows), a.total))
}

/// `G × Q` matching cost
/// `λ_cls·(−p_class) + λ_L1·‖b − g‖₁ + λ_giou·(1 − GIoU(b, g))`, with the
/// L1 term on image-normalized corner coordinates.
pub fn build_hungarian_cost(
    class_probs: &[Vec<f64>],
    boxes: &[BoxXYXY],
    gts: &[GroundTruth],
    image: ImageSize,
    cfg: &MatcherConfig,
) -> Result<Matrix> {
    if class_probs.len() != boxes.len() {
        return Err(Error::invalid(
            "build_hungarian_cost",
            format!("{} probability rows for {} boxes", class_probs.len(), boxes.len()),
        ));
    }
    let q = boxes.len();
    let scale = [
        image.width as f64,
        image.height as f64,
        image.width as f64,
        image.height as f64,
    ];
    let mut data = Vec::with_capacity(gts.len() * q);
    for gt in gts {
        let ga = gt.bbox.to_array();
        for (probs, b) in class_probs.iter().zip(boxes) {
            let p = *probs.get(gt.class_id).ok_or_else(|| {
                Error::invalid("build_hungarian_cost", format!("class {} out of range", gt.class_id))
            })?;
            let ba = b.to_array();
            let l1: f64 = (0..4).map(|i| ((ba[i] - ga[i]) / scale[i]).abs()).sum();
            data.push(cfg.cost_class * -p + cfg.cost_l1 * l1 + cfg.cost_giou * (1.0 - giou(b, &gt.bbox)));
        }
    }
    Matrix::new(gts.len(), q, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn top_k_single_gt() {
        let r = top_k_match(&m(1, 3, &[0.1, 0.5, 0.3]), 2).unwrap();
        assert_eq!(r.labels, vec![Label::Negative, Label::Positive(0), Label::Positive(0)]);
        assert_eq!(r.positives, vec![vec![1, 2]]);
    }

    #[test]
    fn top_k_conflict_no_refill() {
        let r = top_k_match(&m(2, 2, &[0.9, 0.2, 0.8, 0.7]), 1).unwrap();
        assert_eq!(r.labels, vec![Label::Positive(0), Label::Negative]);
    }

    #[test]
    fn top_k_saturates_and_skips_zero_iou() {
        let r = top_k_match(&m(1, 4, &[0.0, 0.2, 0.1, 0.0]), 10).unwrap();
        assert_eq!(r.num_positives(), 2);
    }

    #[test]
    fn top_k_edge_cases() {
        assert!(matches!(top_k_match(&m(1, 1, &[0.5]), 0), Err(Error::Config(_))));
        let r = top_k_match(&Matrix::zeros(0, 3), 2).unwrap();
        assert_eq!(r.labels, vec![Label::Negative; 3]);
    }

    #[test]
    fn absolute_thresholds() {
        let r = absolute_match(&m(1, 3, &[0.8, 0.5, 0.1]), 0.7, 0.3).unwrap();
        assert_eq!(r.labels, vec![Label::Positive(0), Label::Ignore, Label::Negative]);
    }

    #[test]
    fn absolute_forces_best_candidate() {
        let r = absolute_match(&m(1, 3, &[0.1, 0.25, 0.25]), 0.7, 0.3).unwrap();
        assert_eq!(r.labels, vec![Label::Negative, Label::Positive(0), Label::Negative]);
    }

    #[test]
    fn hungarian_examples() {
        let a = hungarian(&m(3, 3, &[0., 1., 1., 1., 0., 1., 1., 1., 0.])).unwrap();
        assert_eq!(a.columns, vec![0, 1, 2]);
        let a = hungarian(&m(2, 3, &[1., 2., 3., 2., 4., 1.])).unwrap();
        assert_eq!(a.columns, vec![0, 2]);
        assert_eq!(a.total, 2.0);
        assert!(hungarian(&Matrix::zeros(3, 2)).is_err());
        let a = hungarian(&Matrix::zeros(3, 5)).unwrap();
        assert_eq!(a.columns, vec![0, 1, 2]);
    }

    #[test]
    fn hungarian_cost_of_perfect_prediction() {
        let b = BoxXYXY::new(10.0, 10.0, 30.0, 40.0);
        let gt = GroundTruth { bbox: b, class_id: 1 };
        let cost = build_hungarian_cost(
            &[vec![0.0, 1.0, 0.0]],
            &[b],
            &[gt],
            ImageSize::new(100, 100),
            &MatcherConfig::default(),
        )
        .unwrap();
        assert!((cost.get(0, 0) + 2.0).abs() < 1e-12);
    }
}
