//! Synthetic shapes scenes, the convolutional backbone stub, and COCO
//! annotation ingestion.

mod backbone;
mod coco;

pub use backbone::{Backbone, BackboneConfig};
pub use coco::{export_coco, load_coco_annotations, parse_coco, CocoCategory, CocoDataset, CocoImage};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::GroundTruth;
use crate::geometry::{iou, BoxXYXY, ImageSize};

pub const CLASS_NAMES: [&str; 3] = ["rectangle", "ellipse", "triangle"];

/// Base RGB color per shape class.
const CLASS_COLORS: [[f64; 3]; 3] = [[0.9, 0.2, 0.2], [0.2, 0.85, 0.25], [0.25, 0.3, 0.95]];

/// Overlap above which a new object placement is redrawn.
const MAX_PLACEMENT_IOU: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Number of shape classes, at most 3.
    pub num_classes: usize,
    /// Object extent range in pixels (each side drawn independently).
    pub min_size: f64,
    pub max_size: f64,
    /// Per-channel uniform jitter around the class color.
    pub color_jitter: f64,
    /// Per-pixel uniform background noise amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 128,
            height: 128,
            min_objects: 1,
            max_objects: 8,
            num_classes: 3,
            min_size: 16.0,
            max_size: 64.0,
            color_jitter: 0.15,
            noise: 0.08,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return bad(format!("data.classes must be in 1..=3, got {}", self.num_classes));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!(
                "object count range {}..={} is empty or includes 0",
                self.min_objects, self.max_objects
            ));
        }
        if !(2.0 <= self.min_size && self.min_size <= self.max_size)
            || self.max_size > self.width.min(self.height) as f64
        {
            return bad(format!(
                "object size range {}..{} does not fit a {}×{} image",
                self.min_size, self.max_size, self.width, self.height
            ));
        }
        if !(0.0..=0.5).contains(&self.color_jitter) || !(0.0..=0.5).contains(&self.noise) {
            return bad("color jitter and noise must lie in [0, 0.5]".into());
        }
        Ok(())
    }

    pub fn image_size(&self) -> ImageSize {
        ImageSize::new(self.width, self.height)
    }
}

/// Geometry of one drawn object, in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Rectangle { x1: f64, y1: f64, x2: f64, y2: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Triangle { pts: [[f64; 2]; 3] },
}

impl Shape {
    /// Whether the point `(x, y)` lies inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rectangle { x1, y1, x2, y2 } => x >= x1 && x < x2 && y >= y1 && y < y2,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (u, v) = ((x - cx) / rx, (y - cy) / ry);
                u * u + v * v <= 1.0
            }
            Shape::Triangle { pts } => {
                let cross = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
                let d = [cross(pts[0], pts[1]), cross(pts[1], pts[2]), cross(pts[2], pts[0])];
                d.iter().all(|v| *v >= 0.0) || d.iter().all(|v| *v <= 0.0)
            }
        }
    }

    fn extent(&self) -> BoxXYXY {
        match *self {
            Shape::Rectangle { x1, y1, x2, y2 } => BoxXYXY::new(x1, y1, x2, y2),
            Shape::Ellipse { cx, cy, rx, ry } => BoxXYXY::new(cx - rx, cy - ry, cx + rx, cy + ry),
            Shape::Triangle { pts } => {
                let xs = pts.map(|p| p[0]);
                let ys = pts.map(|p| p[1]);
                BoxXYXY::new(
                    xs.iter().cloned().fold(f64::INFINITY, f64::min),
                    ys.iter().cloned().fold(f64::INFINITY, f64::min),
                    xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                )
            }
        }
    }
}

/// One image with its annotations. `image` is `H × W × 3`, row-major, in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub size: ImageSize,
    pub image: Vec<f64>,
    pub gts: Vec<GroundTruth>,
    pub shapes: Vec<Shape>,
}

impl Sample {
    /// Mirrors the image and its annotations left to right.
    pub fn hflip(&self) -> Sample {
        let (w, h) = (self.size.width, self.size.height);
        let mut image = vec![0.0; self.image.len()];
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * 3;
                let dst = (y * w + (w - 1 - x)) * 3;
                image[dst..dst + 3].copy_from_slice(&self.image[src..src + 3]);
            }
        }
        let wf = w as f64;
        let gts = self
            .gts
            .iter()
            .map(|g| GroundTruth {
                bbox: g.bbox.hflip(wf),
                class_id: g.class_id,
            })
            .collect();
        let shapes = self
            .shapes
            .iter()
            .map(|s| match *s {
                Shape::Rectangle { x1, y1, x2, y2 } => Shape::Rectangle {
                    x1: wf - x2,
                    y1,
                    x2: wf - x1,
                    y2,
                },
                Shape::Ellipse { cx, cy, rx, ry } => Shape::Ellipse { cx: wf - cx, cy, rx, ry },
                Shape::Triangle { pts } => Shape::Triangle {
                    pts: pts.map(|p| [wf - p[0], p[1]]),
                },
            })
            .collect();
        Sample {
            size: self.size,
            image,
            gts,
            shapes,
        }
    }
}

/// Per-sample generator, a pure function of `(seed, index)`.
fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Pixel-center support of `shape` on a `w × h` grid: texel `(i, j)` is
/// covered when `(j + 0.5, i + 0.5)` is inside.
fn rasterize(shape: &Shape, w: usize, h: usize) -> Vec<(usize, usize)> {
    let e = shape.extent();
    let x0 = (e.x1 - 1.0).floor().max(0.0) as usize;
    let y0 = (e.y1 - 1.0).floor().max(0.0) as usize;
    let x1 = ((e.x2 + 1.0).ceil() as usize).min(w);
    let y1 = ((e.y2 + 1.0).ceil() as usize).min(h);
    let mut px = Vec::new();
    for i in y0..y1 {
        for j in x0..x1 {
            if shape.contains(j as f64 + 0.5, i as f64 + 0.5) {
                px.push((i, j));
            }
        }
    }
    px
}

fn draw_shape<R: Rng>(rng: &mut R, class: usize, spec: &SceneSpec) -> Shape {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let bw = rng.gen_range(spec.min_size..=spec.max_size).round();
    let bh = rng.gen_range(spec.min_size..=spec.max_size).round();
    let x1 = rng.gen_range(0.0..=(w - bw)).round();
    let y1 = rng.gen_range(0.0..=(h - bh)).round();
    match class {
        0 => Shape::Rectangle {
            x1,
            y1,
            x2: x1 + bw,
            y2: y1 + bh,
        },
        1 => Shape::Ellipse {
            cx: x1 + bw / 2.0,
            cy: y1 + bh / 2.0,
            rx: bw / 2.0,
            ry: bh / 2.0,
        },
        _ => {
            let apex = x1 + rng.gen_range(0.0..=bw);
            let pts = if rng.gen_bool(0.5) {
                [[apex, y1], [x1 + bw, y1 + bh], [x1, y1 + bh]]
            } else {
                [[apex, y1 + bh], [x1, y1], [x1 + bw, y1]]
            };
            Shape::Triangle { pts }
        }
    }
}

/// Renders scene `index` of `spec`.
///
/// Each annotation is the tight bounding box of its shape's pixel support.
pub fn generate_sample(spec: &SceneSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = sample_rng(spec.seed, index);
    let (w, h) = (spec.width, spec.height);
    let base: f64 = rng.gen_range(0.35..0.65);
    let mut image: Vec<f64> = (0..w * h * 3)
        .map(|_| (base + rng.gen_range(-spec.noise..=spec.noise)).clamp(0.0, 1.0))
        .collect();
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut gts: Vec<GroundTruth> = Vec::with_capacity(count);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(0..spec.num_classes);
        // The last attempt is kept even if it overlaps, so the drawn count holds.
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let shape = draw_shape(&mut rng, class, spec);
            let px = rasterize(&shape, w, h);
            if px.is_empty() {
                continue;
            }
            let bbox = support_box(&px);
            let free = gts.iter().all(|g| iou(&g.bbox, &bbox) <= MAX_PLACEMENT_IOU);
            placed = Some((shape, px, bbox));
            if free {
                break;
            }
        }
        let Some((shape, px, bbox)) = placed else { continue };
        let color = CLASS_COLORS[class].map(|c| (c + rng.gen_range(-spec.color_jitter..=spec.color_jitter)).clamp(0.0, 1.0));
        for (i, j) in px {
            image[(i * w + j) * 3..][..3].copy_from_slice(&color);
        }
        gts.push(GroundTruth { bbox, class_id: class });
        shapes.push(shape);
    }
    Ok(Sample {
        size: spec.image_size(),
        image,
        gts,
        shapes,
    })
}

fn support_box(px: &[(usize, usize)]) -> BoxXYXY {
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for &(i, j) in px {
        x1 = x1.min(j);
        y1 = y1.min(i);
        x2 = x2.max(j + 1);
        y2 = y2.max(i + 1);
    }
    BoxXYXY::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
}

/// Index ranges of the train and validation splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
}

impl Splits {
    pub fn train_range(&self) -> std::ops::Range<u64> {
        0..self.train as u64
    }

    pub fn val_range(&self) -> std::ops::Range<u64> {
        self.train as u64..(self.train + self.val) as u64
    }
}

/// One manifest entry per generated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub gts: Vec<GroundTruth>,
}

/// Dataset manifest: generation parameters, category table, and the
/// annotations of every sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub spec: SceneSpec,
    pub categories: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

pub fn build_manifest(spec: &SceneSpec, count: usize) -> Result<Manifest> {
    let entries = (0..count as u64)
        .map(|i| {
            generate_sample(spec, i).map(|s| ManifestEntry {
                index: i,
                gts: s.gts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Manifest {
        seed: spec.seed,
        count,
        spec: spec.clone(),
        categories: CLASS_NAMES[..spec.num_classes].iter().map(|s| s.to_string()).collect(),
        entries,
    })
}
