//! COCO annotation JSON: ingestion into ground-truth lists and export.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::evalkit::GroundTruth;
use crate::geometry::BoxXYXY;

#[derive(Clone, Debug, PartialEq)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

/// Images with their ground truths; class ids index `categories`, which is
/// sorted by original category id.
#[derive(Clone, Debug, PartialEq)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub categories: Vec<CocoCategory>,
    pub gts: Vec<Vec<GroundTruth>>,
    /// Annotations dropped for a non-positive width or height.
    pub skipped: usize,
}

fn field<'a>(obj: &'a Value, name: &str, ctx: &str) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::Parse {
        context: ctx.into(),
        field: name.into(),
    })
}

fn uint(obj: &Value, name: &str, ctx: &str) -> Result<u64> {
    field(obj, name, ctx)?.as_u64().ok_or_else(|| Error::Parse {
        context: ctx.into(),
        field: name.into(),
    })
}

fn array<'a>(obj: &'a Value, name: &str, ctx: &str) -> Result<&'a Vec<Value>> {
    field(obj, name, ctx)?.as_array().ok_or_else(|| Error::Parse {
        context: ctx.into(),
        field: name.into(),
    })
}

pub fn parse_coco(doc: &Value) -> Result<CocoDataset> {
    let mut images = Vec::new();
    let mut by_id = BTreeMap::new();
    for (i, im) in array(doc, "images", "coco")?.iter().enumerate() {
        let ctx = format!("images[{i}]");
        let id = uint(im, "id", &ctx)?;
        let file_name = im
            .get("file_name")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let width = uint(im, "width", &ctx)? as usize;
        let height = uint(im, "height", &ctx)? as usize;
        by_id.insert(id, images.len());
        images.push(CocoImage {
            id,
            file_name,
            width,
            height,
        });
    }
    let mut categories = Vec::new();
    for (i, c) in array(doc, "categories", "coco")?.iter().enumerate() {
        let ctx = format!("categories[{i}]");
        categories.push(CocoCategory {
            id: uint(c, "id", &ctx)?,
            name: c.get("name").and_then(Value::as_str).unwrap_or_default().to_string(),
        });
    }
    categories.sort_by_key(|c| c.id);
    let class_of: BTreeMap<u64, usize> = categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();

    let mut gts = vec![Vec::new(); images.len()];
    let mut skipped = 0;
    for (i, a) in array(doc, "annotations", "coco")?.iter().enumerate() {
        let ctx = format!("annotations[{i}]");
        let image_id = uint(a, "image_id", &ctx)?;
        let cat = uint(a, "category_id", &ctx)?;
        let bad = |f: &str| Error::Parse {
            context: ctx.clone(),
            field: f.into(),
        };
        let bbox: Vec<f64> = array(a, "bbox", &ctx)?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| bad("bbox")))
            .collect::<Result<_>>()?;
        if bbox.len() != 4 || bbox.iter().any(|v| !v.is_finite()) {
            return Err(bad("bbox"));
        }
        let &slot = by_id.get(&image_id).ok_or_else(|| bad("image_id"))?;
        let &class_id = class_of.get(&cat).ok_or_else(|| bad("category_id"))?;
        let [x, y, w, h] = [bbox[0], bbox[1], bbox[2], bbox[3]];
        if w <= 0.0 || h <= 0.0 {
            skipped += 1;
            continue;
        }
        gts[slot].push(GroundTruth {
            bbox: BoxXYXY::new(x, y, x + w, y + h),
            class_id,
        });
    }
    if skipped > 0 {
        warn!("skipped {skipped} annotations with non-positive extent");
    }
    Ok(CocoDataset {
        images,
        categories,
        gts,
        skipped,
    })
}

pub fn load_coco_annotations(path: &Path) -> Result<CocoDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Value = serde_json::from_str(&text)?;
    parse_coco(&doc)
}

/// COCO annotation JSON for `ds`; annotation ids count from 1.
pub fn export_coco(ds: &CocoDataset) -> Value {
    let images: Vec<Value> = ds
        .images
        .iter()
        .map(|im| json!({"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}))
        .collect();
    let categories: Vec<Value> = ds
        .categories
        .iter()
        .map(|c| json!({"id": c.id, "name": c.name}))
        .collect();
    let mut annotations = Vec::new();
    for (im, gts) in ds.images.iter().zip(&ds.gts) {
        for g in gts {
            let b = g.bbox;
            let mut a = Map::new();
            a.insert("id".into(), json!(annotations.len() + 1));
            a.insert("image_id".into(), json!(im.id));
            a.insert("category_id".into(), json!(ds.categories[g.class_id].id));
            a.insert("bbox".into(), json!([b.x1, b.y1, b.width(), b.height()]));
            a.insert("area".into(), json!(b.area()));
            a.insert("iscrowd".into(), json!(0));
            annotations.push(Value::Object(a));
        }
    }
    json!({"images": images, "annotations": annotations, "categories": categories})
}
