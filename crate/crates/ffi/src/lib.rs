//! C ABI over the fqdet crate.
//!
//! Every function returns an [`FqdetStatus`]; on failure the message is
//! available from [`fqdet_last_error`] on the same thread. Models are opaque
//! handles released with [`fqdet_model_free`]. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fqdet::data::{generate_sample, SceneSpec};
use fqdet::evalkit::{nms, InferConfig, Strategy};
use fqdet::geometry::{decode_box, encode_box, giou, iou, BoxDelta, BoxXYXY, ImageSize};
use fqdet::matching::{hungarian, Matrix};
use fqdet::model::Detector;
use fqdet::train::load_checkpoint;
use fqdet::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FqdetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Shape = 5,
    Config = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FqdetBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FqdetDetection {
    pub bbox: FqdetBox,
    pub class_id: u32,
    pub score: f64,
}

/// Inference strategy for [`fqdet_model_detect`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FqdetStrategy {
    /// One label per box.
    Old = 0,
    /// Every class of every box enters NMS.
    New = 1,
}

/// Opaque model handle.
pub struct FqdetModel {
    detector: Detector,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FqdetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => FqdetStatus::Shape,
            Error::InvalidArgument { .. } | Error::NonFinite { .. } | Error::NearKink { .. } | Error::Diverged { .. } => {
                FqdetStatus::InvalidArgument
            }
            Error::Config(_) => FqdetStatus::Config,
            Error::Parse { .. } | Error::Json(_) | Error::Archive { .. } => FqdetStatus::Parse,
            Error::Io { .. } => FqdetStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FqdetStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FqdetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FqdetStatus::Ok,
        Ok(Err(Failure(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            FqdetStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

fn to_box(b: &FqdetBox) -> Result<BoxXYXY, Failure> {
    Ok(BoxXYXY::try_new(b.x1, b.y1, b.x2, b.y2)?)
}

fn from_box(b: BoxXYXY) -> FqdetBox {
    FqdetBox {
        x1: b.x1,
        y1: b.y1,
        x2: b.x2,
        y2: b.y2,
    }
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fqdet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Intersection over union of two boxes.
///
/// # Safety
/// All pointers must be valid for the duration of the call.
#[no_mangle]
pub unsafe extern "C" fn fqdet_iou(a: *const FqdetBox, b: *const FqdetBox, result: *mut f64) -> FqdetStatus {
    guard(|| {
        let v = iou(&to_box(deref(a, "a")?)?, &to_box(deref(b, "b")?)?);
        *out(result, "result")? = v;
        Ok(())
    })
}

/// Generalized IoU of two boxes.
///
/// # Safety
/// All pointers must be valid for the duration of the call.
#[no_mangle]
pub unsafe extern "C" fn fqdet_giou(a: *const FqdetBox, b: *const FqdetBox, result: *mut f64) -> FqdetStatus {
    guard(|| {
        let v = giou(&to_box(deref(a, "a")?)?, &to_box(deref(b, "b")?)?);
        *out(result, "result")? = v;
        Ok(())
    })
}

/// Deltas `(tx, ty, tw, th)` of `target` relative to `anchor`.
///
/// # Safety
/// `delta` must point to 4 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fqdet_encode(
    target: *const FqdetBox,
    anchor: *const FqdetBox,
    delta: *mut f64,
) -> FqdetStatus {
    guard(|| {
        let d = encode_box(&to_box(deref(target, "target")?)?, &to_box(deref(anchor, "anchor")?)?)?;
        slice_mut(delta, 4, "delta")?.copy_from_slice(&d.to_array());
        Ok(())
    })
}

/// Box from deltas relative to `anchor`, clipped to a `width × height` image.
///
/// # Safety
/// `delta` must point to 4 readable doubles.
#[no_mangle]
pub unsafe extern "C" fn fqdet_decode(
    delta: *const f64,
    anchor: *const FqdetBox,
    width: u32,
    height: u32,
    result: *mut FqdetBox,
) -> FqdetStatus {
    guard(|| {
        let d = slice(delta, 4, "delta")?;
        let b = decode_box(
            &BoxDelta::from_array([d[0], d[1], d[2], d[3]]),
            &to_box(deref(anchor, "anchor")?)?,
            ImageSize::new(width as usize, height as usize),
        );
        *out(result, "result")? = from_box(b);
        Ok(())
    })
}

/// Greedy NMS. Writes surviving indices in descending score order to `keep`
/// (capacity `n`) and their number to `kept`.
///
/// # Safety
/// `boxes` and `scores` must hold `n` elements, `keep` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn fqdet_nms(
    boxes: *const FqdetBox,
    scores: *const f64,
    n: usize,
    threshold: f64,
    keep: *mut usize,
    kept: *mut usize,
) -> FqdetStatus {
    guard(|| {
        let bs = slice(boxes, n, "boxes")?
            .iter()
            .map(to_box)
            .collect::<Result<Vec<_>, _>>()?;
        let ss = slice(scores, n, "scores")?;
        if ss.iter().any(|s| !s.is_finite()) {
            return Err(Failure(FqdetStatus::InvalidArgument, "non-finite score".into()));
        }
        let k = nms(&bs, ss, threshold);
        slice_mut(keep, n, "keep")?[..k.len()].copy_from_slice(&k);
        *out(kept, "kept")? = k.len();
        Ok(())
    })
}

/// Minimum-cost assignment of each of `rows` rows to a distinct column of a
/// row-major `rows × cols` cost matrix (`cols ≥ rows`).
///
/// # Safety
/// `cost` must hold `rows · cols` doubles and `assignment` room for `rows`.
#[no_mangle]
pub unsafe extern "C" fn fqdet_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    assignment: *mut usize,
    total: *mut f64,
) -> FqdetStatus {
    guard(|| {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure(FqdetStatus::InvalidArgument, "matrix too large".into()))?;
        let m = Matrix::new(rows, cols, slice(cost, n, "cost")?.to_vec())?;
        let a = hungarian(&m)?;
        slice_mut(assignment, rows, "assignment")?.copy_from_slice(&a.columns);
        *out(total, "total")? = a.total;
        Ok(())
    })
}

/// Renders synthetic sample `index` of the default 128×128 scene with
/// `seed`. `image` receives `128·128·3` HWC values in `[0, 1]`; up to
/// `capacity` ground truths go to `boxes`/`classes` and their number to
/// `count`. Returns `BufferTooSmall` (with `count` set) when they do not fit.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn fqdet_generate_sample(
    seed: u64,
    index: u64,
    image: *mut f64,
    image_len: usize,
    boxes: *mut FqdetBox,
    classes: *mut u32,
    capacity: usize,
    count: *mut usize,
) -> FqdetStatus {
    guard(|| {
        let spec = SceneSpec {
            seed,
            ..SceneSpec::default()
        };
        let s = generate_sample(&spec, index)?;
        if image_len != s.image.len() {
            return Err(Failure(
                FqdetStatus::BufferTooSmall,
                format!("image buffer holds {image_len} values, need {}", s.image.len()),
            ));
        }
        slice_mut(image, image_len, "image")?.copy_from_slice(&s.image);
        *out(count, "count")? = s.gts.len();
        if s.gts.len() > capacity {
            return Err(Failure(
                FqdetStatus::BufferTooSmall,
                format!("{} ground truths, capacity {capacity}", s.gts.len()),
            ));
        }
        let bs = slice_mut(boxes, capacity, "boxes")?;
        let cs = slice_mut(classes, capacity, "classes")?;
        for (i, g) in s.gts.iter().enumerate() {
            bs[i] = from_box(g.bbox);
            cs[i] = g.class_id as u32;
        }
        Ok(())
    })
}

/// Loads a training checkpoint into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `model` writable.
#[no_mangle]
pub unsafe extern "C" fn fqdet_model_load(path: *const c_char, model: *mut *mut FqdetModel) -> FqdetStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(FqdetStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let slot = out(model, "model")?;
        let r = load_checkpoint(Path::new(p), None)?;
        *slot = Box::into_raw(Box::new(FqdetModel { detector: r.detector }));
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must come from [`fqdet_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fqdet_model_free(model: *mut FqdetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input size expected by the model.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fqdet_model_image_size(
    model: *const FqdetModel,
    width: *mut u32,
    height: *mut u32,
) -> FqdetStatus {
    guard(|| {
        let m = deref(model, "model")?;
        *out(width, "width")? = m.detector.config.image.width as u32;
        *out(height, "height")? = m.detector.config.image.height as u32;
        Ok(())
    })
}

/// Detects objects in an HWC image of `image_len = width·height·3` values.
/// Up to `capacity` detections are written in descending score order;
/// `count` receives the total, and `BufferTooSmall` is returned when it
/// exceeds `capacity`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn fqdet_model_detect(
    model: *const FqdetModel,
    image: *const f64,
    image_len: usize,
    strategy: FqdetStrategy,
    nms_threshold: f64,
    max_detections: usize,
    detections: *mut FqdetDetection,
    capacity: usize,
    count: *mut usize,
) -> FqdetStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let ImageSize { width, height } = m.detector.config.image;
        if image_len != width * height * 3 {
            return Err(Failure(
                FqdetStatus::Shape,
                format!("image has {image_len} values, model expects {width}×{height}×3"),
            ));
        }
        let img = slice(image, image_len, "image")?;
        let strategy = match strategy {
            FqdetStrategy::Old => Strategy::Old,
            FqdetStrategy::New => Strategy::New,
        };
        let cfg = InferConfig {
            nms_threshold,
            max_detections,
        };
        let dets = m.detector.detect(img, strategy, &cfg)?;
        *out(count, "count")? = dets.len();
        let dst = slice_mut(detections, capacity, "detections")?;
        for (d, s) in dst.iter_mut().zip(&dets) {
            *d = FqdetDetection {
                bbox: from_box(s.bbox),
                class_id: s.class_id as u32,
                score: s.score,
            };
        }
        if dets.len() > capacity {
            return Err(Failure(
                FqdetStatus::BufferTooSmall,
                format!("{} detections, capacity {capacity}", dets.len()),
            ));
        }
        Ok(())
    })
}
