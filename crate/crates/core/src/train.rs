//! Training loop, validation and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::data::{generate_sample, Sample};
use crate::error::{Error, Result};
use crate::evalkit::{ap_eval, infer, ApReport, Detection, EvalConfig, GroundTruth, Strategy, AREA_LARGE, AREA_MEDIUM, AREA_SMALL};
use crate::losses::LossValues;
use crate::model::Detector;
use crate::tensor::{load_archive, save_archive, AdamW, Archive, DType, Tensor};

pub const METRICS_HEADER: &str = "epoch,iteration,selection,cls,l1,giou,total,ap,ap50,ap75";
pub const TIMING_HEADER: &str = "epoch,iteration,wall_seconds,normalized_time";
pub const TRACE_HEADER: &str = "iteration,selection,cls,l1,giou,total";

/// One evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub iteration: u64,
    /// Mean per-image losses since the previous row.
    pub losses: LossValues,
    pub report: ApReport,
    pub wall_seconds: f64,
    pub normalized_time: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        let l = &self.losses;
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch, self.iteration, l.selection, l.cls, l.l1, l.giou, l.total, r.ap, r.ap50, r.ap75
        )
    }

    pub fn timing_csv(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.iteration, self.wall_seconds, self.normalized_time)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub run_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total.
    pub max_iterations: Option<u64>,
    /// Seconds per normalized-time unit; defaults to this run's first epoch.
    pub time_unit: Option<f64>,
    /// Skip the validation pass after every epoch except the last.
    pub eval_last_only: bool,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub rows: Vec<MetricsRow>,
    /// Mean loss of every optimizer step, in order.
    pub trace: Vec<LossValues>,
    pub iteration: u64,
    pub epochs_done: usize,
    pub epoch_seconds: Vec<f64>,
    pub last_checkpoint: Option<PathBuf>,
    pub peak_bytes: usize,
}

/// Model, optimizer and progress restored from a checkpoint.
pub struct Restored {
    pub config: RunConfig,
    pub detector: Detector,
    pub optimizer: AdamW,
    pub epochs_done: usize,
    pub iteration: u64,
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    det: &Detector,
    opt: &AdamW,
    epochs_done: usize,
    iteration: u64,
) -> Result<()> {
    let mut a = Archive {
        meta: json!({
            "config": cfg.to_text(),
            "epochs_done": epochs_done,
            "iteration": iteration,
            "adam_step": opt.state.step,
        }),
        ..Archive::default()
    };
    det.push_params(&mut a);
    for (i, (_, name, t)) in det.store.iter().enumerate() {
        let shape = t.shape();
        a.push(format!("adam.m.{name}"), DType::F64, Tensor::new(shape, opt.state.m[i].clone())?);
        a.push(format!("adam.v.{name}"), DType::F64, Tensor::new(shape, opt.state.v[i].clone())?);
    }
    save_archive(path, &a)
}

fn meta_u64(a: &Archive, key: &str, path: &Path) -> Result<u64> {
    a.meta.get(key).and_then(|v| v.as_u64()).ok_or_else(|| Error::Archive {
        path: path.to_path_buf(),
        msg: format!("meta field `{key}` missing"),
    })
}

/// Loads a checkpoint; `config` overrides the embedded configuration.
pub fn load_checkpoint(path: &Path, config: Option<&RunConfig>) -> Result<Restored> {
    let a = load_archive(path)?;
    let config = match config {
        Some(c) => c.clone(),
        None => {
            let text = a.meta.get("config").and_then(|v| v.as_str()).ok_or_else(|| Error::Archive {
                path: path.to_path_buf(),
                msg: "meta field `config` missing".into(),
            })?;
            RunConfig::parse(text)?
        }
    };
    let mut detector = Detector::new(config.model(), config.seed)?;
    detector.load_params(&a)?;
    let mut optimizer = AdamW::new(config.optim.adamw.clone(), &detector.store)?;
    optimizer.state.step = meta_u64(&a, "adam_step", path)?;
    for (i, (_, name, t)) in detector.store.iter().enumerate() {
        for (slot, kind) in [(&mut optimizer.state.m[i], "m"), (&mut optimizer.state.v[i], "v")] {
            match a.get(&format!("adam.{kind}.{name}")) {
                Some(s) if s.shape() == t.shape() => slot.copy_from_slice(s.data()),
                Some(s) => {
                    return Err(Error::Shape {
                        op: "load_optimizer",
                        shapes: vec![t.shape().to_vec(), s.shape().to_vec()],
                    })
                }
                None => {}
            }
        }
    }
    Ok(Restored {
        config,
        detector,
        optimizer,
        epochs_done: meta_u64(&a, "epochs_done", path)? as usize,
        iteration: meta_u64(&a, "iteration", path)?,
    })
}

pub fn eval_config(cfg: &RunConfig) -> EvalConfig {
    EvalConfig {
        max_detections: cfg.eval.infer.max_detections,
        area_ranges: if cfg.eval.by_area {
            vec![AREA_SMALL, AREA_MEDIUM, AREA_LARGE]
        } else {
            Vec::new()
        },
        ..EvalConfig::default()
    }
}

/// AP of `det` on the samples `indices`, once per strategy.
pub fn evaluate(
    det: &Detector,
    cfg: &RunConfig,
    indices: impl Iterator<Item = u64>,
    strategies: &[Strategy],
) -> Result<Vec<ApReport>> {
    let mut dets: Vec<Vec<Vec<Detection>>> = vec![Vec::new(); strategies.len()];
    let mut gts: Vec<Vec<GroundTruth>> = Vec::new();
    let c = det.config.head.num_classes;
    for idx in indices {
        let s = generate_sample(&cfg.scene, idx)?;
        let (raw, _) = det.raw_output(&s.image)?;
        let view = raw.view(c, s.size);
        for (i, &st) in strategies.iter().enumerate() {
            dets[i].push(infer(&view, st, &cfg.eval.infer)?);
        }
        gts.push(s.gts);
    }
    let ecfg = eval_config(cfg);
    dets.iter().map(|d| ap_eval(d, &gts, &ecfg)).collect()
}

fn add_scaled(acc: &mut [Vec<f64>], g: &[Vec<f64>], s: f64) {
    for (a, g) in acc.iter_mut().zip(g) {
        for (a, g) in a.iter_mut().zip(g) {
            *a += s * g;
        }
    }
}

fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

fn scaled(v: LossValues, s: f64) -> LossValues {
    LossValues {
        selection: v.selection * s,
        cls: v.cls * s,
        l1: v.l1 * s,
        giou: v.giou * s,
        total: v.total * s,
    }
}

fn finite(v: &LossValues) -> bool {
    [v.selection, v.cls, v.l1, v.giou, v.total].iter().all(|x| x.is_finite())
}

/// Training sample `idx`, flipped horizontally when the coin says so.
fn training_sample(cfg: &RunConfig, idx: u64, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let s = generate_sample(&cfg.scene, idx)?;
    Ok(if cfg.hflip && rng.gen_bool(0.5) { s.hflip() } else { s })
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng
}

pub fn checkpoint_path(run_dir: &Path, epochs_done: usize) -> PathBuf {
    run_dir.join(format!("checkpoint-{epochs_done:03}.fqd"))
}

fn append(path: &Path, header: &str, line: &str) -> Result<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        writeln!(text, "{header}").unwrap();
    }
    writeln!(text, "{line}").unwrap();
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains from scratch or from `opts.resume`, writing checkpoints, the
/// resolved configuration and CSV logs into `opts.run_dir`.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    let dir = &opts.run_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (mut det, mut opt, start_epoch, mut iteration) = match &opts.resume {
        Some(p) => {
            let r = load_checkpoint(p, Some(cfg))?;
            (r.detector, r.optimizer, r.epochs_done, r.iteration)
        }
        None => {
            let det = Detector::new(cfg.model(), cfg.seed)?;
            let opt = AdamW::new(cfg.optim.adamw.clone(), &det.store)?;
            (det, opt, 0, 0)
        }
    };
    let resolved = dir.join("resolved-config.txt");
    fs::write(&resolved, cfg.to_text()).map_err(|e| Error::io(&resolved, e))?;
    info!("{} parameters, {} anchors", det.num_params(), det.anchors().len());

    let metrics = dir.join("metrics.csv");
    let timing = dir.join("timing.csv");
    let trace_path = dir.join("trace.csv");
    let mut summary = TrainSummary {
        rows: Vec::new(),
        trace: Vec::new(),
        iteration,
        epochs_done: start_epoch,
        epoch_seconds: Vec::new(),
        last_checkpoint: opts.resume.clone(),
        peak_bytes: 0,
    };
    let started = Instant::now();
    let mut unit = opts.time_unit;
    let train_ids: Vec<u64> = cfg.splits.train_range().collect();
    let batch = cfg.optim.batch;
    let epochs = cfg.optim.epochs;

    'epochs: for epoch in start_epoch..epochs {
        let epoch_start = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order = train_ids.clone();
        order.shuffle(&mut rng);
        let lr_scale = cfg.optim.lr_scale(epoch);
        let mut since_row = LossValues::default();
        let mut steps_since_row = 0usize;
        let mut stopped = false;
        for chunk in order.chunks(batch) {
            if opts.max_iterations.is_some_and(|m| iteration >= m) {
                stopped = true;
                break;
            }
            let mut grads: Vec<Vec<f64>> = det.store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
            let mut step_loss = LossValues::default();
            let w = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let s = training_sample(cfg, idx, &mut rng)?;
                let r = det.train_step(&s.image, &s.gts, &cfg.matcher, &cfg.loss)?;
                if !finite(&r.losses) || r.grads.iter().flatten().any(|g| !g.is_finite()) {
                    return Err(Error::Diverged { iteration });
                }
                summary.peak_bytes = summary.peak_bytes.max(r.peak_bytes);
                add_scaled(&mut grads, &r.grads, w);
                step_loss += scaled(r.losses, w);
            }
            if cfg.optim.clip_norm > 0.0 {
                clip_global_norm(&mut grads, cfg.optim.clip_norm);
            }
            opt.step(&mut det.store, &grads, lr_scale)?;
            iteration += 1;
            let l = &step_loss;
            append(
                &trace_path,
                TRACE_HEADER,
                &format!("{},{},{},{},{},{}", iteration, l.selection, l.cls, l.l1, l.giou, l.total),
            )?;
            summary.trace.push(step_loss);
            since_row += step_loss;
            steps_since_row += 1;
            if iteration % 50 == 0 {
                info!("epoch {epoch} iteration {iteration} loss {:.4}", step_loss.total);
            }
        }
        let seconds = epoch_start.elapsed().as_secs_f64();
        if !stopped {
            summary.epoch_seconds.push(seconds);
            summary.epochs_done = epoch + 1;
            let ck = checkpoint_path(dir, epoch + 1);
            save_checkpoint(&ck, cfg, &det, &opt, epoch + 1, iteration)?;
            summary.last_checkpoint = Some(ck);
        }
        let unit_secs = *unit.get_or_insert(seconds.max(1e-9));
        let last = epoch + 1 == epochs || stopped;
        let due = if opts.eval_last_only {
            last
        } else {
            last || (epoch + 1) % cfg.eval.every == 0
        };
        if due && steps_since_row > 0 {
            let report = evaluate(&det, cfg, cfg.splits.val_range(), &[cfg.eval.strategy])?.remove(0);
            let wall = started.elapsed().as_secs_f64();
            let row = MetricsRow {
                epoch: epoch + 1,
                iteration,
                losses: scaled(since_row, 1.0 / steps_since_row as f64),
                report,
                wall_seconds: wall,
                normalized_time: wall / unit_secs,
            };
            info!(
                "epoch {} AP {:.4} AP50 {:.4} AP75 {:.4}",
                row.epoch, row.report.ap, row.report.ap50, row.report.ap75
            );
            append(&metrics, METRICS_HEADER, &row.csv())?;
            append(&timing, TIMING_HEADER, &row.timing_csv())?;
            summary.rows.push(row);
        }
        if stopped {
            break 'epochs;
        }
    }
    summary.iteration = iteration;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        clip_global_norm(&mut g, 1.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[1][0] - 0.8).abs() < 1e-12);
    }
}
