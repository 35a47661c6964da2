//! Backbone and head assembled into a trainable detector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::evalkit::{infer, Detection, GroundTruth, HeadOutput, InferConfig, Strategy};
use crate::geometry::{decode_box, iou_matrix, AnchorSet, BoxDelta, BoxXYXY, ImageSize};
use crate::head::{Head, HeadConfig, HeadForward, LayerOutput};
use crate::losses::{assemble_losses, FocalParams, LossTerms, LossValues, LossWeights, PredictionSet};
use crate::matching::{
    absolute_match, build_hungarian_cost, hungarian_match, top_k_match, MatchResult, MatchScheme, MatcherConfig,
    Matrix,
};
use crate::tensor::{Archive, DType, Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image: ImageSize,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if self.backbone.channels != self.head.backbone_dim {
            return Err(Error::Config(format!(
                "backbone channels {} differ from head.backbone_dim {}",
                self.backbone.channels, self.head.backbone_dim
            )));
        }
        if self.backbone.levels != self.head.msda.levels {
            return Err(Error::Config(format!(
                "backbone has {} levels, msda.levels is {}",
                self.backbone.levels, self.head.msda.levels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub focal: FocalParams,
    pub weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal: FocalParams::default(),
            weights: LossWeights::default(),
        }
    }
}

/// Per-query outputs of the last prediction set, detached from any tape.
#[derive(Clone, Debug)]
pub struct RawOutput {
    pub logits: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
    pub refs: Vec<BoxXYXY>,
}

impl RawOutput {
    pub fn view(&self, num_classes: usize, image: ImageSize) -> HeadOutput<'_> {
        HeadOutput {
            logits: &self.logits,
            deltas: &self.deltas,
            anchors: &self.refs,
            num_classes,
            image,
        }
    }
}

/// Result of one training forward/backward pass on a single image.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub grads: Vec<Vec<f64>>,
    pub losses: LossValues,
    pub peak_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: Head,
    anchors: AnchorSet,
    strides: Vec<usize>,
}

impl Detector {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.backbone, &mut rng)?;
        let head = Head::new(&mut store, config.head.clone(), &mut rng)?;
        let levels = backbone.level_shapes(config.image.height, config.image.width)?;
        let anchors = AnchorSet::generate(&levels, &config.head.anchors)?;
        let strides = backbone.strides();
        Ok(Detector {
            config,
            store,
            backbone,
            head,
            anchors,
            strides,
        })
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn num_params(&self) -> usize {
        self.store.count()
    }

    pub fn forward(&self, g: &mut Graph, image: &[f64]) -> Result<HeadForward> {
        let ImageSize { width, height } = self.config.image;
        let x = g.constant(Tensor::new(&[height, width, 3], image.to_vec())?);
        let pyramid = self.backbone.forward(g, x)?;
        self.head.forward(g, &pyramid, &self.anchors, &self.strides, self.config.image)
    }

    /// Stage-1 labels: static top-k over every feature-anchor combination.
    pub fn match_stage1(&self, gts: &[GroundTruth]) -> Result<MatchResult> {
        let boxes: Vec<BoxXYXY> = gts.iter().map(|g| g.bbox).collect();
        let iou = Matrix::new(gts.len(), self.anchors.len(), iou_matrix(&boxes, self.anchors.boxes()))?;
        top_k_match(&iou, self.config.head.select_k)
    }

    /// Stage-2 labels for one prediction set. Static schemes compare ground
    /// truths with the query anchors; Hungarian uses the set's predictions.
    pub fn match_stage2(
        &self,
        g: &Graph,
        fwd: &HeadForward,
        out: &LayerOutput,
        gts: &[GroundTruth],
        cfg: &MatcherConfig,
    ) -> Result<MatchResult> {
        let q = fwd.queries.len();
        let gt_boxes: Vec<BoxXYXY> = gts.iter().map(|g| g.bbox).collect();
        let anchor_iou = || -> Result<Matrix> {
            let anchors: Vec<BoxXYXY> = fwd.queries.iter().map(|q| q.anchor).collect();
            Matrix::new(gts.len(), q, iou_matrix(&gt_boxes, &anchors))
        };
        match cfg.scheme {
            MatchScheme::TopK => top_k_match(&anchor_iou()?, cfg.k),
            MatchScheme::Absolute => absolute_match(&anchor_iou()?, cfg.pos_thr, cfg.neg_thr),
            MatchScheme::Hungarian => {
                if gts.is_empty() {
                    return Ok(MatchResult::all_negative(q));
                }
                let raw = detach_output(g, out);
                let c = self.config.head.num_classes;
                let probs: Vec<Vec<f64>> = raw
                    .logits
                    .chunks_exact(c + 1)
                    .map(|row| row[..c].iter().map(|&x| sigmoid(x)).collect())
                    .collect();
                let boxes = decode_all(&raw, self.config.image);
                let cost = build_hungarian_cost(&probs, &boxes, gts, self.config.image, cfg)?;
                Ok(hungarian_match(&cost)?.0)
            }
        }
    }

    pub fn losses(
        &self,
        g: &mut Graph,
        fwd: &HeadForward,
        gts: &[GroundTruth],
        matcher: &MatcherConfig,
        loss: &LossConfig,
    ) -> Result<LossTerms> {
        let stage1 = self.match_stage1(gts)?;
        let mut sets = Vec::with_capacity(fwd.outputs.len());
        for out in &fwd.outputs {
            sets.push(PredictionSet {
                logits: out.logits,
                deltas: out.deltas,
                refs: out.refs.clone(),
                matches: self.match_stage2(g, fwd, out, gts, matcher)?,
            });
        }
        assemble_losses(
            g,
            fwd.scores,
            &stage1,
            &sets,
            gts,
            self.config.head.num_classes,
            loss.focal,
            loss.weights,
        )
    }

    /// Forward, loss and backward on one image.
    pub fn train_step(
        &self,
        image: &[f64],
        gts: &[GroundTruth],
        matcher: &MatcherConfig,
        loss: &LossConfig,
    ) -> Result<StepResult> {
        let mut g = Graph::new(&self.store, true);
        let fwd = self.forward(&mut g, image)?;
        let terms = self.losses(&mut g, &fwd, gts, matcher, loss)?;
        let losses = terms.values(&g);
        let grads = g.param_grads(terms.total)?;
        Ok(StepResult {
            grads,
            losses,
            peak_bytes: g.peak_bytes(),
        })
    }

    /// Outputs of the final prediction set for one image.
    pub fn raw_output(&self, image: &[f64]) -> Result<(RawOutput, usize)> {
        let mut g = Graph::new(&self.store, false);
        let fwd = self.forward(&mut g, image)?;
        let last = fwd.outputs.last().expect("the last layer always predicts");
        Ok((detach_output(&g, last), g.peak_bytes()))
    }

    pub fn detect(&self, image: &[f64], strategy: Strategy, cfg: &InferConfig) -> Result<Vec<Detection>> {
        let (raw, _) = self.raw_output(image)?;
        infer(&raw.view(self.config.head.num_classes, self.config.image), strategy, cfg)
    }

    /// Parameters as archive entries named `param.<name>`.
    pub fn push_params(&self, archive: &mut Archive) {
        for (_, name, t) in self.store.iter() {
            archive.push(format!("param.{name}"), DType::F64, t.clone());
        }
    }

    pub fn load_params(&mut self, archive: &Archive) -> Result<()> {
        self.store.load_named(|name| archive.get(&format!("param.{name}")))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn detach_output(g: &Graph, out: &LayerOutput) -> RawOutput {
    RawOutput {
        logits: g.value(out.logits).data().to_vec(),
        deltas: g
            .value(out.deltas)
            .data()
            .chunks_exact(4)
            .map(|d| [d[0], d[1], d[2], d[3]])
            .collect(),
        refs: out.refs.iter().map(|r| r.to_xyxy()).collect(),
    }
}

/// Clipped boxes decoded from every query's deltas.
pub fn decode_all(raw: &RawOutput, image: ImageSize) -> Vec<BoxXYXY> {
    raw.deltas
        .iter()
        .zip(&raw.refs)
        .map(|(d, r)| decode_box(&BoxDelta::from_array(*d), r, image))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msda::SamplingSpec;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            image: ImageSize::new(32, 32),
            backbone: BackboneConfig {
                channels: 8,
                stem_channels: 4,
                levels: 2,
            },
            head: HeadConfig {
                num_queries: 6,
                layers: 2,
                dim: 8,
                ffn_dim: 16,
                attn_heads: 2,
                backbone_dim: 8,
                msda: SamplingSpec {
                    heads: 2,
                    levels: 2,
                    points: 2,
                },
                ..HeadConfig::default()
            },
        }
    }

    #[test]
    fn one_step_is_finite_and_checkpoint_roundtrips() {
        let det = Detector::new(tiny(), 3).unwrap();
        let image = vec![0.5; 32 * 32 * 3];
        let gts = [GroundTruth {
            bbox: BoxXYXY::new(4.0, 4.0, 20.0, 28.0),
            class_id: 1,
        }];
        for scheme in [MatchScheme::TopK, MatchScheme::Absolute, MatchScheme::Hungarian] {
            let m = MatcherConfig {
                scheme,
                ..MatcherConfig::default()
            };
            let s = det.train_step(&image, &gts, &m, &LossConfig::default()).unwrap();
            assert!(s.losses.total.is_finite() && s.losses.total > 0.0);
            assert_eq!(s.grads.len(), det.store.len());
        }
        let mut a = Archive::default();
        det.push_params(&mut a);
        let mut other = Detector::new(tiny(), 4).unwrap();
        other.load_params(&a).unwrap();
        let d1 = det.detect(&image, Strategy::New, &InferConfig::default()).unwrap();
        let d2 = other.detect(&image, Strategy::New, &InferConfig::default()).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn mismatched_levels_are_rejected() {
        let mut cfg = tiny();
        cfg.backbone.levels = 3;
        assert!(Detector::new(cfg, 0).is_err());
    }
}
