//! Implementations behind the command-line subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{build_manifest, export_coco, generate_sample, CocoCategory, CocoDataset, CocoImage, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::evalkit::{ApReport, Strategy};
use crate::geometry::ImageSize;
use crate::matching::MatchScheme;
use crate::model::Detector;
use crate::tensor::{save_archive, AdamW, Archive, DType, Tensor};
use crate::train::{evaluate, load_checkpoint, train, TrainOptions};

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Which samples an evaluation runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub strategy: String,
    pub images: usize,
    pub epochs_done: usize,
    #[serde(flatten)]
    pub ap: ApReport,
}

/// Evaluates a checkpoint; `config` replaces the configuration stored in it.
pub fn cmd_eval(
    checkpoint: &Path,
    config: Option<&RunConfig>,
    split: Split,
    strategy: Strategy,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let r = load_checkpoint(checkpoint, config)?;
    let cfg = &r.config;
    let range = match split {
        Split::Train => cfg.splits.train_range(),
        Split::Val => cfg.splits.val_range(),
    };
    let images = range.clone().count();
    let ap = evaluate(&r.detector, cfg, range, &[strategy])?.remove(0);
    let report = EvalReport {
        strategy: strategy.to_string(),
        images,
        epochs_done: r.epochs_done,
        ap,
    };
    if let Some(dir) = out {
        mkdir(dir)?;
        write(&dir.join("resolved-config.txt"), &cfg.to_text())?;
        write(&dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// Ablation axes, each mirroring one comparison table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Anchors,
    BoxLoss,
    Aux,
    Ibbr,
    Matching,
    Points,
    Inference,
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "anchors" => Axis::Anchors,
            "boxloss" => Axis::BoxLoss,
            "aux" => Axis::Aux,
            "ibbr" => Axis::Ibbr,
            "matching" => Axis::Matching,
            "points" => Axis::Points,
            "inference" => Axis::Inference,
            _ => return Err(Error::Config(format!("unknown ablation axis `{s}`"))),
        })
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::Anchors => "anchors",
            Axis::BoxLoss => "boxloss",
            Axis::Aux => "aux",
            Axis::Ibbr => "ibbr",
            Axis::Matching => "matching",
            Axis::Points => "points",
            Axis::Inference => "inference",
        })
    }
}

/// One ablation row: a name, config overrides and the inference strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(&'static str, String)>,
    pub strategy: Option<Strategy>,
}

fn variant(name: &str, overrides: &[(&'static str, &str)]) -> Variant {
    Variant {
        name: name.into(),
        overrides: overrides.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        strategy: None,
    }
}

/// Row set of an axis, in table order.
pub fn variants(axis: Axis) -> Vec<Variant> {
    match axis {
        Axis::Anchors => [(1, 1), (1, 3), (3, 1), (3, 3)]
            .iter()
            .map(|&(s, r)| {
                variant(
                    &format!("sizes={s};ratios={r}"),
                    &[("head.anchor_sizes", &s.to_string()), ("head.anchor_ratios", &r.to_string())],
                )
            })
            .collect(),
        Axis::BoxLoss => vec![
            variant("l1+giou", &[("loss.cls", "2"), ("loss.l1", "5"), ("loss.giou", "2")]),
            variant("l1", &[("loss.cls", "1"), ("loss.l1", "1"), ("loss.giou", "0")]),
        ],
        Axis::Aux => vec![
            variant("aux+shared", &[("head.aux_losses", "true"), ("head.shared_heads", "true")]),
            variant("aux+unshared", &[("head.aux_losses", "true"), ("head.shared_heads", "false")]),
            variant("none", &[("head.aux_losses", "false"), ("head.ibbr", "false")]),
        ],
        Axis::Ibbr => vec![
            variant(
                "aux+ibbr+shared",
                &[("head.aux_losses", "true"), ("head.ibbr", "true"), ("head.shared_heads", "true")],
            ),
            variant(
                "aux+ibbr+unshared",
                &[("head.aux_losses", "true"), ("head.ibbr", "true"), ("head.shared_heads", "false")],
            ),
            variant("none", &[("head.aux_losses", "false"), ("head.ibbr", "false")]),
        ],
        Axis::Matching => [MatchScheme::Hungarian, MatchScheme::Absolute, MatchScheme::TopK]
            .iter()
            .map(|s| {
                let name = s.to_string();
                Variant {
                    overrides: vec![("match.scheme", name.clone())],
                    name,
                    strategy: None,
                }
            })
            .collect(),
        Axis::Points => vec![
            variant("points=4", &[("msda.points", "4"), ("eval.strategy", "old")]),
            variant("points=1", &[("msda.points", "1"), ("eval.strategy", "old")]),
        ],
        Axis::Inference => [Strategy::Old, Strategy::New]
            .iter()
            .map(|&s| Variant {
                name: s.to_string(),
                overrides: Vec::new(),
                strategy: Some(s),
            })
            .collect(),
    }
}

pub const ABLATION_HEADER: &str = "axis,variant,ap,ap50,ap75,params,train_seconds,wall_seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: Axis,
    pub variant: String,
    pub report: ApReport,
    pub params: usize,
    /// Training time of the run this row was evaluated on.
    pub train_seconds: f64,
    /// Training plus evaluation time.
    pub wall_seconds: f64,
}

impl AblationRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3},{:.3}",
            self.axis,
            self.variant,
            self.report.ap,
            self.report.ap50,
            self.report.ap75,
            self.params,
            self.train_seconds,
            self.wall_seconds
        )
    }
}

/// Trains every variant of `axis` from `base` with the same seed and budget
/// and writes `ablation-<axis>.csv` into `out`.
pub fn cmd_ablate(axis: Axis, base: &RunConfig, out: &Path) -> Result<Vec<AblationRow>> {
    mkdir(out)?;
    let mut rows = Vec::new();
    let vs = variants(axis);
    if axis == Axis::Inference {
        // Both strategies are evaluated on one shared checkpoint.
        let dir = out.join(axis.to_string());
        let t0 = Instant::now();
        let summary = train(
            base,
            &TrainOptions {
                run_dir: dir.clone(),
                eval_last_only: true,
                ..TrainOptions::default()
            },
        )?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let ck = summary
            .last_checkpoint
            .ok_or_else(|| Error::invalid("ablate", "training produced no checkpoint"))?;
        let r = load_checkpoint(&ck, Some(base))?;
        for v in &vs {
            let t1 = Instant::now();
            let strategy = v.strategy.expect("inference variants name a strategy");
            let report = evaluate(&r.detector, base, base.splits.val_range(), &[strategy])?.remove(0);
            rows.push(AblationRow {
                axis,
                variant: v.name.clone(),
                report,
                params: r.detector.num_params(),
                train_seconds,
                wall_seconds: train_seconds + t1.elapsed().as_secs_f64(),
            });
            info!("{}", rows.last().unwrap().csv());
        }
    } else {
        for v in &vs {
            let mut cfg = base.clone();
            for (k, val) in &v.overrides {
                cfg.set(k, val)?;
            }
            cfg.validate()?;
            let dir = out.join(axis.to_string()).join(v.name.replace([';', '=', '+'], "_"));
            let t0 = Instant::now();
            let summary = train(
                &cfg,
                &TrainOptions {
                    run_dir: dir,
                    eval_last_only: true,
                    ..TrainOptions::default()
                },
            )?;
            let wall = t0.elapsed().as_secs_f64();
            let row = summary
                .rows
                .last()
                .ok_or_else(|| Error::invalid("ablate", "training produced no evaluation"))?;
            rows.push(AblationRow {
                axis,
                variant: v.name.clone(),
                report: row.report.clone(),
                params: Detector::new(cfg.model(), cfg.seed)?.num_params(),
                train_seconds: summary.epoch_seconds.iter().sum(),
                wall_seconds: wall,
            });
            info!("{}", rows.last().unwrap().csv());
        }
    }
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        writeln!(text, "{}", r.csv()).unwrap();
    }
    write(&out.join(format!("ablation-{axis}.csv")), &text)?;
    write(&out.join("resolved-config.txt"), &base.to_text())?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub params: usize,
    /// Training images per second (forward, backward and optimizer step).
    pub tfps: f64,
    /// Peak live tape bytes of one training image.
    pub tmem_bytes: usize,
    /// Inference images per second.
    pub ifps: f64,
    pub imem_bytes: usize,
    /// Per-repetition rates, for the stability check.
    pub tfps_runs: Vec<f64>,
    pub ifps_runs: Vec<f64>,
}

pub const BENCH_REPETITIONS: usize = 5;

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Throughput and memory proxy on `count` synthetic `size × size` images
/// with `objects` objects each; medians over [`BENCH_REPETITIONS`] runs.
pub fn cmd_bench(base: &RunConfig, size: usize, count: usize, objects: usize) -> Result<BenchReport> {
    if count == 0 {
        return Err(Error::Config("bench needs at least one image".into()));
    }
    let mut cfg = base.clone();
    cfg.scene.width = size;
    cfg.scene.height = size;
    cfg.scene.min_objects = objects;
    cfg.scene.max_objects = objects;
    cfg.scene.max_size = cfg.scene.max_size.min(size as f64 / 2.0);
    cfg.scene.min_size = cfg.scene.min_size.min(cfg.scene.max_size);
    cfg.validate()?;
    let mut det = Detector::new(cfg.model(), cfg.seed)?;
    let mut opt = AdamW::new(cfg.optim.adamw.clone(), &det.store)?;
    let samples = (0..count as u64)
        .map(|i| generate_sample(&cfg.scene, i))
        .collect::<Result<Vec<_>>>()?;

    let mut tmem = 0;
    let mut train_once = |det: &mut Detector, opt: &mut AdamW| -> Result<()> {
        let mut grads: Vec<Vec<f64>> = det.store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        for s in &samples {
            let r = det.train_step(&s.image, &s.gts, &cfg.matcher, &cfg.loss)?;
            tmem = tmem.max(r.peak_bytes);
            for (a, g) in grads.iter_mut().zip(&r.grads) {
                a.iter_mut().zip(g).for_each(|(a, g)| *a += g / count as f64);
            }
        }
        opt.step(&mut det.store, &grads, 1.0)
    };
    train_once(&mut det, &mut opt)?;
    let mut tfps_runs = Vec::with_capacity(BENCH_REPETITIONS);
    for _ in 0..BENCH_REPETITIONS {
        let t0 = Instant::now();
        train_once(&mut det, &mut opt)?;
        tfps_runs.push(count as f64 / t0.elapsed().as_secs_f64());
    }

    let mut imem = 0;
    let mut infer_once = || -> Result<()> {
        for s in &samples {
            let (raw, peak) = det.raw_output(&s.image)?;
            imem = imem.max(peak);
            crate::evalkit::infer(&raw.view(cfg.head.num_classes, s.size), cfg.eval.strategy, &cfg.eval.infer)?;
        }
        Ok(())
    };
    infer_once()?;
    let mut ifps_runs = Vec::with_capacity(BENCH_REPETITIONS);
    for _ in 0..BENCH_REPETITIONS {
        let t0 = Instant::now();
        infer_once()?;
        ifps_runs.push(count as f64 / t0.elapsed().as_secs_f64());
    }
    Ok(BenchReport {
        params: det.num_params(),
        tfps: median(&tfps_runs),
        tmem_bytes: tmem,
        ifps: median(&ifps_runs),
        imem_bytes: imem,
        tfps_runs,
        ifps_runs,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenDataOutput {
    pub manifest: PathBuf,
    /// Hex SHA-256 of the manifest file.
    pub hash: String,
    pub annotations: PathBuf,
    pub images: Option<PathBuf>,
}

/// Writes `manifest.json`, its hash, COCO annotations and, when asked, an
/// archive of the rendered images (f32, one tensor per sample).
pub fn cmd_gen_data(cfg: &RunConfig, count: usize, out: &Path, with_images: bool) -> Result<GenDataOutput> {
    mkdir(out)?;
    let spec = &cfg.scene;
    let manifest = build_manifest(spec, count)?;
    let text = serde_json::to_string_pretty(&manifest)?;
    let manifest_path = out.join("manifest.json");
    write(&manifest_path, &text)?;
    let hash: String = Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    write(&out.join("manifest.sha256"), &format!("{hash}  manifest.json\n"))?;

    let ImageSize { width, height } = spec.image_size();
    let ds = CocoDataset {
        images: manifest
            .entries
            .iter()
            .map(|e| CocoImage {
                id: e.index,
                file_name: format!("{:06}", e.index),
                width,
                height,
            })
            .collect(),
        categories: CLASS_NAMES[..spec.num_classes]
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory {
                id: i as u64 + 1,
                name: n.to_string(),
            })
            .collect(),
        gts: manifest.entries.iter().map(|e| e.gts.clone()).collect(),
        skipped: 0,
    };
    let annotations = out.join("annotations.json");
    write(&annotations, &serde_json::to_string_pretty(&export_coco(&ds))?)?;

    let images = if with_images {
        let mut a = Archive {
            meta: json!({"seed": spec.seed, "count": count, "layout": "HWC"}),
            ..Archive::default()
        };
        for i in 0..count as u64 {
            let s = generate_sample(spec, i)?;
            a.push(format!("{i:06}"), DType::F32, Tensor::new(&[height, width, 3], s.image)?);
        }
        let p = out.join("images.fqd");
        save_archive(&p, &a)?;
        Some(p)
    } else {
        None
    };
    write(&out.join("resolved-config.txt"), &cfg.to_text())?;
    Ok(GenDataOutput {
        manifest: manifest_path,
        hash,
        annotations,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_row_sets() {
        let names = |a| variants(a).into_iter().map(|v| v.name).collect::<Vec<_>>();
        assert_eq!(names(Axis::Matching), ["hungarian", "absolute", "topk"]);
        assert_eq!(names(Axis::Anchors).len(), 4);
        assert_eq!(names(Axis::Aux), ["aux+shared", "aux+unshared", "none"]);
        for a in ["anchors", "boxloss", "aux", "ibbr", "matching", "points", "inference"] {
            let axis: Axis = a.parse().unwrap();
            assert_eq!(axis.to_string(), a);
            for v in variants(axis) {
                let mut c = RunConfig::default();
                for (k, val) in &v.overrides {
                    c.set(k, val).unwrap();
                }
                c.validate().unwrap();
            }
        }
    }
}
