//! Finite-difference gradient checks of every differentiable kernel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::BackboneConfig;
use crate::error::{Error, Result};
use crate::evalkit::GroundTruth;
use crate::geometry::{AnchorConfig, BoxXYXY, ImageSize};
use crate::head::HeadConfig;
use crate::losses::{decode_on_tape, giou_loss, l1_box_loss, selection_loss, sigmoid_focal_loss, FocalParams};
use crate::matching::{Label, MatchResult, MatcherConfig};
use crate::model::{Detector, LossConfig, ModelConfig};
use crate::msda::SamplingSpec;
use crate::nn::{Mlp, MultiHeadAttention};
use crate::tensor::{gradcheck, gradcheck_fn, Graph, LevelSpan, ParamGroup, ParamStore, Tape, Tensor, Var};

pub const EPS: f64 = 1e-6;
pub const KERNEL_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
pub const POINTS: usize = 10;
/// Resampling budget per accepted point.
const ATTEMPTS: usize = 50;

#[derive(Clone, Debug)]
pub struct KernelReport {
    pub name: String,
    pub max_rel_error: f64,
    pub points: usize,
    pub coords: usize,
    pub rejected: usize,
    pub tolerance: f64,
}

impl KernelReport {
    pub fn passed(&self) -> bool {
        self.points >= POINTS && self.max_rel_error <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<24} max_rel_err {:.3e} (tol {:.0e}) points {} coords {} rejected {}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tolerance,
            self.points,
            self.coords,
            self.rejected
        )
    }
}

/// Runs `check` at `POINTS` accepted points drawn by `sample`; points near a
/// kink are redrawn.
pub fn check_points<S, C>(name: &str, tolerance: f64, seed: u64, sample: S, check: C) -> Result<KernelReport>
where
    S: Fn(&mut ChaCha8Rng) -> Tensor,
    C: Fn(&Tensor) -> Result<(f64, usize)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = KernelReport {
        name: name.into(),
        max_rel_error: 0.0,
        points: 0,
        coords: 0,
        rejected: 0,
        tolerance,
    };
    while report.points < POINTS {
        if report.rejected > ATTEMPTS * POINTS {
            return Err(Error::invalid("gradcheck", format!("{name}: no kink-free points found")));
        }
        let p = sample(&mut rng);
        match check(&p) {
            Ok((err, coords)) => {
                report.max_rel_error = report.max_rel_error.max(err);
                report.coords = coords;
                report.points += 1;
            }
            Err(Error::NearKink { .. }) => report.rejected += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

/// Tape-function check: `f` maps the leaf to any tensor, which is reduced
/// to a scalar through fixed random weights.
pub fn check_op<S, F>(name: &str, seed: u64, sample: S, f: F) -> Result<KernelReport>
where
    S: Fn(&mut ChaCha8Rng) -> Tensor,
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_points(name, KERNEL_TOL, seed, sample, |p| {
        let r = gradcheck(
            |t, x| {
                let y = f(t, x)?;
                project(t, y)
            },
            p,
            EPS,
        )?;
        Ok((r.max_rel_error, r.coords))
    })
}

/// `Σ w ⊙ y` with weights fixed by the shape of `y`.
fn project(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().fold(7, |a, &s| a * 31 + s as u64));
    let w = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum_all(p))
}

fn uniform(shape: &'static [usize], lo: f64, hi: f64) -> impl Fn(&mut ChaCha8Rng) -> Tensor {
    move |r| Tensor::uniform(shape, lo, hi, r)
}

fn constant(t: &mut Tape, shape: &[usize], seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    t.constant(Tensor::uniform(shape, -1.0, 1.0, &mut rng))
}

/// Tensor-core op checks.
pub fn core_op_checks() -> Result<Vec<KernelReport>> {
    let s34 = uniform(&[3, 4], -2.0, 2.0);
    let pos = uniform(&[3, 4], 0.5, 2.0);
    let mut out = vec![
        check_op("matmul", 1, uniform(&[4, 3], -1.0, 1.0), |t, x| {
            let b = constant(t, &[3, 5], 11);
            t.matmul(x, b)
        })?,
        check_op("matmul_batched", 2, uniform(&[2, 3, 4], -1.0, 1.0), |t, x| {
            let b = constant(t, &[2, 4, 2], 12);
            t.matmul(x, b)
        })?,
        check_op("matmul_t", 3, uniform(&[4, 3], -1.0, 1.0), |t, x| {
            let b = constant(t, &[5, 3], 13);
            let y = t.matmul_t(x, b)?;
            t.matmul_t(y, y)
        })?,
        check_op("add_broadcast", 4, uniform(&[4], -1.0, 1.0), |t, x| {
            let b = constant(t, &[3, 4], 14);
            let y = t.add(b, x)?;
            t.mul(y, y)
        })?,
        check_op("sub_mul_div", 5, pos, |t, x| {
            let b = constant(t, &[3, 4], 15);
            let y = t.sub(x, b)?;
            let y = t.mul(y, x)?;
            t.div(y, x)
        })?,
        check_op("scalar_ops", 6, s34, |t, x| {
            let y = t.scale(x, -1.5);
            let y = t.add_scalar(y, 0.25);
            let y = t.neg(y);
            Ok(t.square(y))
        })?,
        check_op("relu", 7, uniform(&[3, 4], -2.0, 2.0), |t, x| Ok(t.relu(x)))?,
        check_op("sigmoid", 8, uniform(&[3, 4], -4.0, 4.0), |t, x| Ok(t.sigmoid(x)))?,
        check_op("exp", 9, uniform(&[3, 4], -2.0, 2.0), |t, x| Ok(t.exp(x)))?,
        check_op("log", 10, uniform(&[3, 4], 0.2, 3.0), |t, x| Ok(t.log(x)))?,
        check_op("sqrt", 11, uniform(&[3, 4], 0.2, 3.0), |t, x| Ok(t.sqrt(x)))?,
        check_op("abs", 12, uniform(&[3, 4], -2.0, 2.0), |t, x| Ok(t.abs(x)))?,
        check_op("clamp", 13, uniform(&[3, 4], -2.0, 2.0), |t, x| {
            let y = t.clamp_min(x, -0.5);
            Ok(t.clamp_max(y, 0.7))
        })?,
        check_op("maximum_minimum", 14, uniform(&[3, 4], -1.0, 1.0), |t, x| {
            let b = constant(t, &[3, 4], 16);
            let hi = t.maximum(x, b)?;
            let lo = t.minimum(x, b)?;
            t.mul(hi, lo)
        })?,
        check_op("sum_mean_axis", 15, uniform(&[2, 3, 4], -1.0, 1.0), |t, x| {
            let s = t.sum_axis(x, 1)?;
            let m = t.mean_axis(x, 2)?;
            let a = t.sum_all(s);
            let s2 = t.mul(s, s)?;
            let b = t.mean_all(m);
            let m2 = t.sum_all(s2);
            let y = t.add(a, b)?;
            t.add(y, m2)
        })?,
        check_op("max_axis", 16, uniform(&[3, 4], -2.0, 2.0), |t, x| {
            let m = t.max_axis(x, 1)?;
            let a = t.max_all(x)?;
            let m = t.mul(m, m)?;
            let s = t.sum_all(m);
            t.add(s, a)
        })?,
        check_op("softmax", 17, uniform(&[3, 5], -3.0, 3.0), |t, x| t.softmax(x, 1))?,
        check_op("softmax_cross_entropy", 18, uniform(&[4, 5], -3.0, 3.0), |t, x| {
            let p = t.softmax(x, 1)?;
            let lp = t.log(p);
            let mut onehot = vec![0.0; 20];
            for (i, c) in [1, 4, 0, 2].iter().enumerate() {
                onehot[i * 5 + c] = 1.0;
            }
            let y = t.constant(Tensor::new(&[4, 5], onehot)?);
            let l = t.mul(lp, y)?;
            let l = t.sum_all(l);
            Ok(t.neg(l))
        })?,
        check_op("layer_norm", 19, uniform(&[3, 6], -2.0, 2.0), |t, x| t.layer_norm(x, 1e-5))?,
        check_op("concat_reshape", 20, uniform(&[2, 3], -1.0, 1.0), |t, x| {
            let b = constant(t, &[1, 3], 17);
            let c = t.concat(&[x, b, x], 0)?;
            let c2 = t.concat(&[x, x], 1)?;
            let r = t.reshape(c, &[15])?;
            let r2 = t.reshape(c2, &[12])?;
            let y = t.concat(&[r, r2], 0)?;
            t.mul(y, y)
        })?,
        check_op("permute_transpose", 21, uniform(&[2, 3, 4], -1.0, 1.0), |t, x| {
            let p = t.permute(x, &[2, 0, 1])?;
            let q = t.transpose(x, 0, 2)?;
            let p = t.reshape(p, &[24])?;
            let q = t.reshape(q, &[24])?;
            t.mul(p, q)
        })?,
        check_op("index_select_narrow", 22, uniform(&[4, 3], -1.0, 1.0), |t, x| {
            let s = t.index_select(x, &[3, 0, 3, 1])?;
            let n = t.narrow(s, 1, 1, 2)?;
            t.mul(n, n)
        })?,
        check_op("take_last", 23, uniform(&[2, 4], -1.0, 1.0), |t, x| {
            let y = t.take_last(x, &[3, 1, 0, 0], 2)?;
            t.mul(y, y)
        })?,
        check_op("top_k", 24, uniform(&[2, 6], -2.0, 2.0), |t, x| {
            let (v, _) = t.top_k(x, 3)?;
            t.mul(v, v)
        })?,
        check_op("conv2d", 25, uniform(&[5, 6, 2], -1.0, 1.0), |t, x| {
            let w = constant(t, &[3 * 3 * 2, 3], 18);
            let y = t.conv2d(x, w, 3, 2, 1)?;
            t.mul(y, y)
        })?,
        check_op("conv2d_weights", 26, uniform(&[2 * 2 * 3, 2], -1.0, 1.0), |t, w| {
            let x = constant(t, &[4, 4, 3], 19);
            t.conv2d(x, w, 2, 2, 0)
        })?,
    ];
    out.push(check_op("bilinear_map", 27, uniform(&[4, 5, 2], -1.0, 1.0), |t, m| {
        let c = t.constant(Tensor::new(&[3, 2], vec![0.3, 0.6, 2.7, 1.2, -0.4, 3.3])?);
        t.bilinear_sample(m, c)
    })?);
    out.push(check_op("bilinear_coords", 28, uniform(&[6, 2], -0.8, 4.8), |t, c| {
        let m = constant(t, &[4, 5, 2], 20);
        t.bilinear_sample(m, c)
    })?);
    Ok(out)
}

/// Two-level fixture for the fused deformable attention op.
struct MsdaFixture {
    levels: Vec<LevelSpan>,
    rows: usize,
}

impl MsdaFixture {
    const Q: usize = 2;
    const HEADS: usize = 2;
    const K: usize = 2;
    const D: usize = 4;

    fn new() -> Self {
        let levels = vec![LevelSpan { h: 4, w: 4, start: 0 }, LevelSpan { h: 2, w: 2, start: 16 }];
        MsdaFixture { levels, rows: 20 }
    }

    fn locs_shape() -> [usize; 5] {
        [Self::Q, Self::HEADS, 2, Self::K, 2]
    }

    fn weights_shape() -> [usize; 4] {
        [Self::Q, Self::HEADS, 2, Self::K]
    }
}

pub fn msda_checks() -> Result<Vec<KernelReport>> {
    let fx = MsdaFixture::new();
    let lshape = MsdaFixture::locs_shape();
    let wshape = MsdaFixture::weights_shape();
    let (rows, d) = (fx.rows, MsdaFixture::D);
    let levels = fx.levels.clone();
    let value = check_op(
        "msda_value",
        30,
        move |r| Tensor::uniform(&[rows, d], -1.0, 1.0, r),
        |t, v| {
            let l = t.constant(Tensor::uniform(&lshape, -0.7, 3.6, &mut ChaCha8Rng::seed_from_u64(31)));
            let w = constant(t, &wshape, 32);
            t.ms_deform_attn(v, l, w, &levels, MsdaFixture::HEADS)
        },
    )?;
    let levels = fx.levels.clone();
    let locs = check_op(
        "msda_locations",
        33,
        move |r| Tensor::uniform(&lshape, -0.7, 1.6, r),
        |t, l| {
            let v = constant(t, &[rows, d], 34);
            let w = constant(t, &wshape, 35);
            t.ms_deform_attn(v, l, w, &levels, MsdaFixture::HEADS)
        },
    )?;
    let levels = fx.levels.clone();
    let weights = check_op(
        "msda_weights",
        36,
        move |r| Tensor::uniform(&wshape, -1.0, 1.0, r),
        |t, w| {
            let v = constant(t, &[rows, d], 37);
            let l = t.constant(Tensor::uniform(&lshape, -0.7, 3.6, &mut ChaCha8Rng::seed_from_u64(38)));
            let w = t.reshape(w, &[MsdaFixture::Q * MsdaFixture::HEADS, 2 * MsdaFixture::K])?;
            let w = t.softmax(w, 1)?;
            let w = t.reshape(w, &wshape)?;
            t.ms_deform_attn(v, l, w, &levels, MsdaFixture::HEADS)
        },
    )?;
    Ok(vec![value, locs, weights])
}

pub fn loss_checks() -> Result<Vec<KernelReport>> {
    let targets = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
    let focal = check_op("sigmoid_focal", 40, uniform(&[2, 4], -3.0, 3.0), move |t, x| {
        sigmoid_focal_loss(t, x, &targets, FocalParams::default())
    })?;
    let l1 = check_op("l1_box", 41, uniform(&[3, 4], -1.0, 1.0), |t, x| {
        let tgt = [[0.5, 0.5, 0.5, 0.5], [-0.3, 0.2, 0.0, 0.9], [0.05, -0.6, 0.3, -0.2]];
        l1_box_loss(t, Some(x), &tgt, 2.0)
    })?;
    let giou = check_points(
        "giou",
        KERNEL_TOL,
        42,
        |r| {
            let mut d = Vec::new();
            for _ in 0..3 {
                let (x, y) = (r.gen_range(0.0..10.0), r.gen_range(0.0..10.0));
                d.extend([x, y, x + r.gen_range(1.0..8.0), y + r.gen_range(1.0..8.0)]);
            }
            Tensor::new(&[3, 4], d).expect("three boxes")
        },
        |p| {
            let tgt = [[2.0, 3.0, 9.0, 7.0], [0.0, 0.0, 4.0, 4.0], [5.0, 5.0, 12.0, 14.0]];
            let r = gradcheck(|t, x| giou_loss(t, Some(x), &tgt, 1.5), p, EPS)?;
            Ok((r.max_rel_error, r.coords))
        },
    )?;
    let decode = check_op("box_decode", 43, uniform(&[2, 4], -0.5, 0.5), |t, x| {
        let refs = [
            BoxXYXY::new(2.0, 4.0, 10.0, 8.0).to_cwh(),
            BoxXYXY::new(0.0, 1.0, 30.0, 20.0).to_cwh(),
        ];
        decode_on_tape(t, x, &refs)
    })?;
    let selection = check_op("selection_focal", 44, uniform(&[6], -3.0, 3.0), |t, x| {
        use Label::*;
        let m = MatchResult::from_labels(vec![Positive(0), Negative, Ignore, Positive(1), Negative, Negative], 2);
        selection_loss(t, x, &m, FocalParams::default())
    })?;
    Ok(vec![focal, l1, giou, decode, selection])
}

/// Layer checks: gradients with respect to the inputs of a linear MLP and
/// multi-head attention built from a parameter store.
pub fn layer_checks() -> Result<Vec<KernelReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", [4, 6, 3], ParamGroup::Base, &mut rng);
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng)?;
    let mlp_r = check_op("mlp", 51, uniform(&[3, 4], -1.0, 1.0), |t, x| {
        let mut g = Graph::with_tape(&store, std::mem::take(t), false);
        let y = mlp.forward(&mut g, x);
        *t = g.tape;
        y
    })?;
    let mha_r = check_op("multi_head_attention", 52, uniform(&[3, 4], -1.0, 1.0), |t, x| {
        let mut g = Graph::with_tape(&store, std::mem::take(t), false);
        let y = mha.forward(&mut g, x, x);
        *t = g.tape;
        y
    })?;
    Ok(vec![mlp_r, mha_r])
}

/// The micro detector used by the end-to-end check.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        image: ImageSize::new(16, 16),
        backbone: BackboneConfig {
            channels: 8,
            stem_channels: 2,
            levels: 2,
        },
        head: HeadConfig {
            num_queries: 2,
            layers: 1,
            dim: 8,
            ffn_dim: 8,
            attn_heads: 2,
            num_classes: 2,
            backbone_dim: 8,
            msda: SamplingSpec {
                heads: 2,
                levels: 2,
                points: 2,
            },
            anchors: AnchorConfig::grid(1, 2),
            ..HeadConfig::default()
        },
    }
}

/// Every parameter of the micro detector against the full training loss,
/// on a random image, with L1 and GIoU box terms both active.
pub fn end_to_end_check() -> Result<KernelReport> {
    let mut det = Detector::new(micro_config(), 60)?;
    let loss = LossConfig {
        weights: crate::losses::LossWeights { cls: 1.0, l1: 1.0, giou: 1.0 },
        ..LossConfig::default()
    };
    let matcher = MatcherConfig { k: 1, ..MatcherConfig::default() };
    let gts = [
        GroundTruth { bbox: BoxXYXY::new(1.0, 2.0, 9.0, 12.0), class_id: 0 },
        GroundTruth { bbox: BoxXYXY::new(6.0, 5.0, 15.0, 11.0), class_id: 1 },
    ];
    let flat_len: usize = det.store.iter().map(|(_, _, t)| t.numel()).sum();
    let init: Vec<f64> = det.store.iter().flat_map(|(_, _, t)| t.data().to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut report = KernelReport {
        name: "end_to_end_micro".into(),
        max_rel_error: 0.0,
        points: 0,
        coords: flat_len,
        rejected: 0,
        tolerance: END_TO_END_TOL,
    };
    while report.points < POINTS {
        if report.rejected > ATTEMPTS * POINTS {
            return Err(Error::invalid("gradcheck", "end_to_end_micro: no kink-free points found"));
        }
        let image = Tensor::uniform(&[16 * 16 * 3], 0.0, 1.0, &mut rng);
        // Perturb the initialization so every point has distinct weights.
        let point: Vec<f64> = init.iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
        let point = Tensor::from_vec(point);
        set_flat(&mut det.store, point.data());
        let analytic = {
            let mut g = Graph::with_tape(&det.store, Tape::with_kink_tracking(), true);
            let fwd = det.forward(&mut g, image.data())?;
            let terms = det.losses(&mut g, &fwd, &gts, &matcher, &loss)?;
            if g.kink_margin().is_some_and(|m| m < crate::tensor::KINK_MARGIN) {
                report.rejected += 1;
                continue;
            }
            let grads = g.param_grads(terms.total)?;
            grads.concat()
        };
        let probe = det.clone();
        let queries = selected(&det, image.data())?;
        let eval = |p: &Tensor| -> Result<f64> {
            let mut d = probe.clone();
            set_flat(&mut d.store, p.data());
            let mut g = Graph::new(&d.store, false);
            let fwd = d.forward(&mut g, image.data())?;
            if fwd.queries.iter().map(|q| q.flat).collect::<Vec<_>>() != queries {
                // A perturbation that changes the selected set is a kink.
                return Err(Error::NearKink { margin: 0.0 });
            }
            let terms = d.losses(&mut g, &fwd, &gts, &matcher, &loss)?;
            Ok(g.value(terms.total).item())
        };
        match gradcheck_fn(eval, &analytic, &point, EPS) {
            Ok(r) => {
                report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
                report.points += 1;
            }
            Err(Error::NearKink { .. }) => report.rejected += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

fn selected(det: &Detector, image: &[f64]) -> Result<Vec<usize>> {
    let mut g = Graph::new(&det.store, false);
    let fwd = det.forward(&mut g, image)?;
    Ok(fwd.queries.iter().map(|q| q.flat).collect())
}

fn set_flat(store: &mut ParamStore, flat: &[f64]) {
    let ids: Vec<_> = store.ids().collect();
    let mut at = 0;
    for id in ids {
        let t = store.get_mut(id).data_mut();
        let n = t.len();
        t.copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

/// A check whose analytic gradient is deliberately wrong by 1%; it must fail.
pub fn negative_control() -> Result<KernelReport> {
    check_points(
        "negative_control",
        KERNEL_TOL,
        70,
        uniform(&[4], -2.0, 2.0),
        |p| {
            let analytic: Vec<f64> = p.data().iter().map(|x| 3.0 * x * x * 1.01).collect();
            let r = gradcheck_fn(|q| Ok(q.data().iter().map(|x| x * x * x).sum()), &analytic, p, EPS)?;
            Ok((r.max_rel_error, r.coords))
        },
    )
}

/// The full suite, in report order.
pub fn run_all() -> Result<Vec<KernelReport>> {
    let mut out = core_op_checks()?;
    out.extend(msda_checks()?);
    out.extend(loss_checks()?);
    out.extend(layer_checks()?);
    out.push(end_to_end_check()?);
    Ok(out)
}
