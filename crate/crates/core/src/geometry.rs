//! Axis-aligned boxes, overlap metrics, the anchor-relative delta codec and
//! anchor generation over a feature pyramid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper clamp on decoded log-scale ratios, `ln(1000 / 16)`.
pub fn max_log_scale() -> f64 {
    (1000.0f64 / 16.0).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: usize,
    pub height: usize,
}

impl ImageSize {
    pub fn new(width: usize, height: usize) -> Self {
        ImageSize { width, height }
    }
}

/// Corner-encoded box in pixels. Serializes as `[x1, y1, x2, y2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BoxXYXY {
    fn from(a: [f64; 4]) -> Self {
        BoxXYXY::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BoxXYXY> for [f64; 4] {
    fn from(b: BoxXYXY) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoxXYXY {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxXYXY { x1, y1, x2, y2 }
    }

    /// Validating constructor: finite coordinates with `x2 ≥ x1`, `y2 ≥ y1`.
    pub fn try_new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoxXYXY::new(x1, y1, x2, y2);
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::invalid("box", format!("invalid box {:?}", b.to_array())))
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 >= self.x1
            && self.y2 >= self.y1
    }

    pub fn to_array(self) -> [f64; 4] {
        self.into()
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn to_cwh(self) -> BoxCWH {
        BoxCWH {
            cx: 0.5 * (self.x1 + self.x2),
            cy: 0.5 * (self.y1 + self.y2),
            w: self.width(),
            h: self.height(),
        }
    }

    pub fn clip(self, image: ImageSize) -> Self {
        let (w, h) = (image.width as f64, image.height as f64);
        BoxXYXY {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn hflip(self, image_width: f64) -> Self {
        BoxXYXY {
            x1: image_width - self.x2,
            y1: self.y1,
            x2: image_width - self.x1,
            y2: self.y2,
        }
    }
}

/// Center/size-encoded box in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCWH {
    pub fn try_new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !cx.is_finite() || !cy.is_finite() || !w.is_finite() || !h.is_finite() {
            return Err(Error::invalid("box_cwh", format!("non-positive extent {w}×{h}")));
        }
        Ok(BoxCWH { cx, cy, w, h })
    }

    pub fn to_xyxy(self) -> BoxXYXY {
        BoxXYXY {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }
}

/// Anchor-relative box encoding: center offsets in anchor units and log
/// size ratios.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxDelta {
            tx: a[0],
            ty: a[1],
            tw: a[2],
            th: a[3],
        }
    }
}

fn intersection(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − (hull − union) / hull`.
pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let hull = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    if hull <= 0.0 {
        return 0.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (hull - union) / hull
}

/// Row-major `boxes_a.len() × boxes_b.len()` IoU matrix.
pub fn iou_matrix(a: &[BoxXYXY], b: &[BoxXYXY]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        out.extend(b.iter().map(|y| iou(x, y)));
    }
    out
}

pub fn encode_box(target: &BoxXYXY, anchor: &BoxXYXY) -> Result<BoxDelta> {
    let a = anchor.to_cwh();
    let t = target.to_cwh();
    if !(a.w > 0.0 && a.h > 0.0) {
        return Err(Error::invalid("encode_box", "anchor has non-positive extent"));
    }
    if !(t.w > 0.0 && t.h > 0.0) {
        return Err(Error::invalid("encode_box", "box has non-positive extent"));
    }
    Ok(BoxDelta {
        tx: (t.cx - a.cx) / a.w,
        ty: (t.cy - a.cy) / a.h,
        tw: (t.w / a.w).ln(),
        th: (t.h / a.h).ln(),
    })
}

/// Inverse of [`encode_box`] with the log ratios clamped at
/// [`max_log_scale`] and the result clipped to the image.
pub fn decode_box(delta: &BoxDelta, anchor: &BoxXYXY, image: ImageSize) -> BoxXYXY {
    decode_box_unclipped(delta, anchor).clip(image)
}

pub fn decode_box_unclipped(delta: &BoxDelta, anchor: &BoxXYXY) -> BoxXYXY {
    let a = anchor.to_cwh();
    let lim = max_log_scale();
    BoxCWH {
        cx: a.cx + delta.tx * a.w,
        cy: a.cy + delta.ty * a.h,
        w: a.w * delta.tw.min(lim).exp(),
        h: a.h * delta.th.min(lim).exp(),
    }
    .to_xyxy()
}

/// Spatial layout of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelShape {
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

/// Anchor type table: every (scale, ratio) pair, ratio = height / width.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Per-level base size as a multiple of the level stride.
    pub base_multiplier: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            scales: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            ratios: vec![0.5, 1.0, 2.0],
            base_multiplier: 4.0,
        }
    }
}

impl AnchorConfig {
    /// First `sizes` scales and `ratios` ratios of the default table, with
    /// 1 size meaning scale 2⁰ and 1 ratio meaning 1:1.
    pub fn grid(sizes: usize, ratios: usize) -> Self {
        let d = AnchorConfig::default();
        AnchorConfig {
            scales: if sizes == 1 { vec![1.0] } else { d.scales[..sizes.min(3)].to_vec() },
            ratios: if ratios == 1 { vec![1.0] } else { d.ratios[..ratios.min(3)].to_vec() },
            base_multiplier: d.base_multiplier,
        }
    }

    pub fn num_types(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Decomposition of a flat anchor index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnchorIndex {
    pub level: usize,
    pub y: usize,
    pub x: usize,
    pub kind: usize,
}

/// All anchors of a pyramid, flattened level-major, then row-major over the
/// grid, then by anchor type.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    levels: Vec<LevelShape>,
    config: AnchorConfig,
    offsets: Vec<usize>,
    boxes: Vec<BoxXYXY>,
}

impl AnchorSet {
    pub fn generate(levels: &[LevelShape], config: &AnchorConfig) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("generate_anchors", "empty pyramid"));
        }
        if config.scales.is_empty() || config.ratios.is_empty() {
            return Err(Error::invalid("generate_anchors", "empty scale or ratio list"));
        }
        if config.scales.iter().chain(&config.ratios).any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("generate_anchors", "scales and ratios must be positive"));
        }
        let mut shapes = Vec::new();
        for &s in &config.scales {
            for &r in &config.ratios {
                shapes.push((s / r.sqrt(), s * r.sqrt()));
            }
        }
        let mut boxes = Vec::new();
        let mut offsets = Vec::with_capacity(levels.len());
        for lv in levels {
            offsets.push(boxes.len());
            let stride = lv.stride as f64;
            let base = config.base_multiplier * stride;
            for y in 0..lv.h {
                for x in 0..lv.w {
                    let cx = (x as f64 + 0.5) * stride;
                    let cy = (y as f64 + 0.5) * stride;
                    for &(fw, fh) in &shapes {
                        boxes.push(
                            BoxCWH {
                                cx,
                                cy,
                                w: base * fw,
                                h: base * fh,
                            }
                            .to_xyxy(),
                        );
                    }
                }
            }
        }
        Ok(AnchorSet {
            levels: levels.to_vec(),
            config: config.clone(),
            offsets,
            boxes,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_types(&self) -> usize {
        self.config.num_types()
    }

    pub fn levels(&self) -> &[LevelShape] {
        &self.levels
    }

    pub fn config(&self) -> &AnchorConfig {
        &self.config
    }

    pub fn boxes(&self) -> &[BoxXYXY] {
        &self.boxes
    }

    pub fn get(&self, flat: usize) -> BoxXYXY {
        self.boxes[flat]
    }

    /// (scale, ratio) of an anchor type.
    pub fn type_params(&self, kind: usize) -> (f64, f64) {
        let r = self.config.ratios.len();
        (self.config.scales[kind / r], self.config.ratios[kind % r])
    }

    pub fn base_size(&self, level: usize) -> f64 {
        self.config.base_multiplier * self.levels[level].stride as f64
    }

    pub fn locate(&self, flat: usize) -> AnchorIndex {
        let a = self.num_types();
        let level = self.offsets.partition_point(|&o| o <= flat) - 1;
        let local = flat - self.offsets[level];
        let cell = local / a;
        let w = self.levels[level].w;
        AnchorIndex {
            level,
            y: cell / w,
            x: cell % w,
            kind: local % a,
        }
    }

    pub fn flat_index(&self, idx: AnchorIndex) -> usize {
        let w = self.levels[idx.level].w;
        self.offsets[idx.level] + (idx.y * w + idx.x) * self.num_types() + idx.kind
    }

    /// Index of the pyramid feature location (over all levels) an anchor sits on.
    pub fn location(&self, flat: usize) -> usize {
        flat / self.num_types()
    }
}
