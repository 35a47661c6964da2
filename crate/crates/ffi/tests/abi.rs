use std::ffi::{CStr, CString};
use std::ptr;

use fqdet::config::RunConfig;
use fqdet::model::Detector;
use fqdet::tensor::AdamW;
use fqdet::train::save_checkpoint;
use fqdet_ffi::*;

fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> FqdetBox {
    FqdetBox { x1, y1, x2, y2 }
}

fn last_error() -> String {
    let p = fqdet_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn iou_and_giou_values() {
    let a = b(0.0, 0.0, 2.0, 2.0);
    let c = b(1.0, 0.0, 3.0, 2.0);
    let mut v = 0.0;
    assert_eq!(unsafe { fqdet_iou(&a, &c, &mut v) }, FqdetStatus::Ok);
    assert!((v - 1.0 / 3.0).abs() < 1e-12);
    let far = b(4.0, 0.0, 6.0, 2.0);
    assert_eq!(unsafe { fqdet_giou(&a, &far, &mut v) }, FqdetStatus::Ok);
    // hull 6×2 = 12, union 8
    assert!((v - (0.0 - 4.0 / 12.0)).abs() < 1e-12);
}

#[test]
fn null_and_invalid_inputs_report_errors() {
    let a = b(0.0, 0.0, 1.0, 1.0);
    let mut v = 0.0;
    assert_eq!(unsafe { fqdet_iou(ptr::null(), &a, &mut v) }, FqdetStatus::NullPointer);
    assert!(last_error().contains("null"));
    let bad = b(2.0, 0.0, 1.0, 1.0);
    assert_eq!(unsafe { fqdet_iou(&bad, &a, &mut v) }, FqdetStatus::InvalidArgument);
    let nan = b(f64::NAN, 0.0, 1.0, 1.0);
    assert_ne!(unsafe { fqdet_giou(&nan, &a, &mut v) }, FqdetStatus::Ok);
}

#[test]
fn encode_decode_roundtrip() {
    let anchor = b(10.0, 12.0, 30.0, 40.0);
    let target = b(14.0, 9.0, 27.0, 44.0);
    let mut d = [0.0; 4];
    assert_eq!(unsafe { fqdet_encode(&target, &anchor, d.as_mut_ptr()) }, FqdetStatus::Ok);
    let mut back = b(0.0, 0.0, 0.0, 0.0);
    assert_eq!(unsafe { fqdet_decode(d.as_ptr(), &anchor, 64, 64, &mut back) }, FqdetStatus::Ok);
    for (x, y) in [(back.x1, 14.0), (back.y1, 9.0), (back.x2, 27.0), (back.y2, 44.0)] {
        assert!((x - y).abs() < 1e-9, "{x} vs {y}");
    }
}

#[test]
fn nms_keeps_highest_of_overlapping_pair() {
    let boxes = [b(0.0, 0.0, 10.0, 10.0), b(1.0, 0.0, 11.0, 10.0), b(20.0, 20.0, 30.0, 30.0)];
    let scores = [0.5, 0.9, 0.7];
    let mut keep = [usize::MAX; 3];
    let mut kept = 0;
    let s = unsafe { fqdet_nms(boxes.as_ptr(), scores.as_ptr(), 3, 0.5, keep.as_mut_ptr(), &mut kept) };
    assert_eq!(s, FqdetStatus::Ok);
    assert_eq!(&keep[..kept], &[1, 2]);
}

#[test]
fn hungarian_solves_and_rejects_tall_matrices() {
    let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0];
    let mut cols = [0usize; 2];
    let mut total = 0.0;
    assert_eq!(
        unsafe { fqdet_hungarian(cost.as_ptr(), 2, 3, cols.as_mut_ptr(), &mut total) },
        FqdetStatus::Ok
    );
    // (0,2)+(1,1) = 3, (0,1)+(1,0) = 3; (0,1)+(1,1) illegal; both optimal at 3
    assert_eq!(total, 3.0);
    assert_ne!(cols[0], cols[1]);
    let mut cols3 = [0usize; 3];
    assert_ne!(
        unsafe { fqdet_hungarian(cost.as_ptr(), 3, 2, cols3.as_mut_ptr(), &mut total) },
        FqdetStatus::Ok
    );
}

#[test]
fn generate_sample_reports_capacity() {
    let mut image = vec![0.0; 128 * 128 * 3];
    let mut boxes = vec![b(0.0, 0.0, 0.0, 0.0); 16];
    let mut classes = vec![0u32; 16];
    let mut count = 0;
    let s = unsafe {
        fqdet_generate_sample(7, 3, image.as_mut_ptr(), image.len(), boxes.as_mut_ptr(), classes.as_mut_ptr(), 16, &mut count)
    };
    assert_eq!(s, FqdetStatus::Ok);
    assert!((1..=8).contains(&count));
    assert!(classes[..count].iter().all(|&c| c < 3));
    assert!(image.iter().all(|v| (0.0..=1.0).contains(v)));
    let s = unsafe {
        fqdet_generate_sample(7, 3, image.as_mut_ptr(), image.len(), boxes.as_mut_ptr(), classes.as_mut_ptr(), 0, &mut count)
    };
    assert_eq!(s, FqdetStatus::BufferTooSmall);
    let s = unsafe {
        fqdet_generate_sample(7, 3, image.as_mut_ptr(), 10, boxes.as_mut_ptr(), classes.as_mut_ptr(), 16, &mut count)
    };
    assert_eq!(s, FqdetStatus::BufferTooSmall);
}

fn tiny_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::default();
    for kv in [
        "data.width=32",
        "data.height=32",
        "data.min_size=4",
        "data.max_size=16",
        "data.stem_channels=4",
        "head.queries=6",
        "head.layers=1",
        "head.dim=8",
        "head.ffn=16",
        "head.attn_heads=2",
        "head.backbone_dim=8",
        "msda.heads=2",
        "msda.levels=2",
        "msda.points=2",
    ] {
        cfg.apply_assignment(kv).unwrap();
    }
    cfg.validate().unwrap();
    let det = Detector::new(cfg.model(), 5).unwrap();
    let opt = AdamW::new(cfg.optim.adamw.clone(), &det.store).unwrap();
    let path = dir.join("tiny.fqd");
    save_checkpoint(&path, &cfg, &det, &opt, 0, 0).unwrap();
    path
}

#[test]
fn model_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(tiny_checkpoint(dir.path()).to_str().unwrap()).unwrap();
    let mut model: *mut FqdetModel = ptr::null_mut();
    assert_eq!(unsafe { fqdet_model_load(path.as_ptr(), &mut model) }, FqdetStatus::Ok);
    assert!(!model.is_null());
    let (mut w, mut h) = (0, 0);
    assert_eq!(unsafe { fqdet_model_image_size(model, &mut w, &mut h) }, FqdetStatus::Ok);
    assert_eq!((w, h), (32, 32));

    let image = vec![0.5; 32 * 32 * 3];
    let mut dets = vec![
        FqdetDetection {
            bbox: b(0.0, 0.0, 0.0, 0.0),
            class_id: 0,
            score: 0.0
        };
        64
    ];
    let mut count = 0;
    for strategy in [FqdetStrategy::Old, FqdetStrategy::New] {
        let s = unsafe {
            fqdet_model_detect(model, image.as_ptr(), image.len(), strategy, 0.5, 20, dets.as_mut_ptr(), dets.len(), &mut count)
        };
        assert_eq!(s, FqdetStatus::Ok);
        assert!(count <= 20);
        for d in &dets[..count] {
            assert!(d.bbox.x1 >= 0.0 && d.bbox.x2 <= 32.0 && d.bbox.x1 <= d.bbox.x2);
            assert!(d.class_id < 3 && (0.0..=1.0).contains(&d.score));
        }
        assert!(dets[..count].windows(2).all(|p| p[0].score >= p[1].score));
    }
    let s = unsafe {
        fqdet_model_detect(model, image.as_ptr(), 5, FqdetStrategy::New, 0.5, 20, dets.as_mut_ptr(), dets.len(), &mut count)
    };
    assert_eq!(s, FqdetStatus::Shape);
    unsafe { fqdet_model_free(model) };
    unsafe { fqdet_model_free(ptr::null_mut()) };

    let missing = CString::new(dir.path().join("nope.fqd").to_str().unwrap()).unwrap();
    let mut m2: *mut FqdetModel = ptr::null_mut();
    assert_eq!(unsafe { fqdet_model_load(missing.as_ptr(), &mut m2) }, FqdetStatus::Io);
    assert!(m2.is_null());
    assert!(!last_error().is_empty());
}
