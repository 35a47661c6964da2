//! Flat `key = value` run configuration.
//!
//! Lines are `section.name = value`; `#` starts a comment. Every key has a
//! default, unknown keys are rejected, and [`RunConfig::to_text`] writes the
//! fully resolved form that [`RunConfig::parse`] reads back unchanged.

use std::path::Path;
use std::str::FromStr;

use crate::data::{BackboneConfig, SceneSpec, Splits};
use crate::error::{Error, Result};
use crate::evalkit::{InferConfig, Strategy};
use crate::geometry::AnchorConfig;
use crate::head::HeadConfig;
use crate::losses::{FocalParams, LossWeights};
use crate::matching::{MatchScheme, MatcherConfig};
use crate::model::{LossConfig, ModelConfig};
use crate::tensor::AdamWConfig;

/// Base learning rate at desk scale, where the backbone starts from random
/// weights.
pub const DESK_LR: f64 = 1e-3;

/// Training schedule and optimizer settings.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub adamw: AdamWConfig,
    pub epochs: usize,
    /// Images per optimizer step.
    pub batch: usize,
    /// Learning-rate drops as fractions of the total epoch count.
    pub drops: [f64; 2],
    pub drop_factor: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            adamw: AdamWConfig {
                lr: DESK_LR,
                ..AdamWConfig::default()
            },
            epochs: 12,
            batch: 4,
            drops: [0.75, 0.92],
            drop_factor: 0.1,
            clip_norm: 0.1,
        }
    }
}

impl OptimConfig {
    /// First epoch of each learning-rate drop.
    pub fn drop_epochs(&self) -> [usize; 2] {
        self.drops.map(|f| (f * self.epochs as f64).round() as usize)
    }

    /// Learning-rate multiplier for `epoch` (0-based).
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        let passed = self.drop_epochs().iter().filter(|&&e| epoch >= e).count();
        self.drop_factor.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub strategy: Strategy,
    pub infer: InferConfig,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub every: usize,
    /// Also report per-area AP.
    pub by_area: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            strategy: Strategy::New,
            infer: InferConfig::default(),
            every: 1,
            by_area: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Seeds parameter initialization, shuffling and augmentation.
    pub seed: u64,
    pub scene: SceneSpec,
    pub splits: Splits,
    pub hflip: bool,
    pub stem_channels: usize,
    pub anchor_sizes: usize,
    pub anchor_ratios: usize,
    pub anchor_base: f64,
    pub head: HeadConfig,
    pub matcher: MatcherConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            seed: 0,
            scene: SceneSpec::default(),
            splits: Splits { train: 2000, val: 500 },
            hflip: true,
            stem_channels: 32,
            anchor_sizes: 3,
            anchor_ratios: 3,
            anchor_base: AnchorConfig::default().base_multiplier,
            head: HeadConfig::default(),
            matcher: MatcherConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalOptions::default(),
        };
        c.sync();
        c
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "data.width",
    "data.height",
    "data.min_objects",
    "data.max_objects",
    "data.classes",
    "data.min_size",
    "data.max_size",
    "data.color_jitter",
    "data.noise",
    "data.seed",
    "data.train",
    "data.val",
    "data.hflip",
    "data.stem_channels",
    "head.queries",
    "head.layers",
    "head.dim",
    "head.ffn",
    "head.attn_heads",
    "head.backbone_dim",
    "head.anchor_sizes",
    "head.anchor_ratios",
    "head.anchor_base",
    "head.select_k",
    "head.aux_losses",
    "head.shared_heads",
    "head.ibbr",
    "head.prior_prob",
    "msda.heads",
    "msda.levels",
    "msda.points",
    "match.scheme",
    "match.k",
    "match.pos_thr",
    "match.neg_thr",
    "match.cost_class",
    "match.cost_l1",
    "match.cost_giou",
    "loss.alpha",
    "loss.gamma",
    "loss.cls",
    "loss.l1",
    "loss.giou",
    "optim.lr",
    "optim.slow_lr_mult",
    "optim.weight_decay",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.epochs",
    "optim.batch",
    "optim.drop1",
    "optim.drop2",
    "optim.drop_factor",
    "optim.clip_norm",
    "eval.strategy",
    "eval.nms",
    "eval.max_dets",
    "eval.every",
    "eval.by_area",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

impl RunConfig {
    /// Recomputes fields derived from other keys.
    fn sync(&mut self) {
        self.head.num_classes = self.scene.num_classes;
        let mut anchors = AnchorConfig::grid(self.anchor_sizes, self.anchor_ratios);
        anchors.base_multiplier = self.anchor_base;
        self.head.anchors = anchors;
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let h = &self.head;
        let m = &self.matcher;
        let o = &self.optim;
        let s = &self.scene;
        Some(match key {
            "seed" => self.seed.to_string(),
            "data.width" => s.width.to_string(),
            "data.height" => s.height.to_string(),
            "data.min_objects" => s.min_objects.to_string(),
            "data.max_objects" => s.max_objects.to_string(),
            "data.classes" => s.num_classes.to_string(),
            "data.min_size" => s.min_size.to_string(),
            "data.max_size" => s.max_size.to_string(),
            "data.color_jitter" => s.color_jitter.to_string(),
            "data.noise" => s.noise.to_string(),
            "data.seed" => s.seed.to_string(),
            "data.train" => self.splits.train.to_string(),
            "data.val" => self.splits.val.to_string(),
            "data.hflip" => self.hflip.to_string(),
            "data.stem_channels" => self.stem_channels.to_string(),
            "head.queries" => h.num_queries.to_string(),
            "head.layers" => h.layers.to_string(),
            "head.dim" => h.dim.to_string(),
            "head.ffn" => h.ffn_dim.to_string(),
            "head.attn_heads" => h.attn_heads.to_string(),
            "head.backbone_dim" => h.backbone_dim.to_string(),
            "head.anchor_sizes" => self.anchor_sizes.to_string(),
            "head.anchor_ratios" => self.anchor_ratios.to_string(),
            "head.anchor_base" => self.anchor_base.to_string(),
            "head.select_k" => h.select_k.to_string(),
            "head.aux_losses" => h.aux_losses.to_string(),
            "head.shared_heads" => h.shared_heads.to_string(),
            "head.ibbr" => h.ibbr.to_string(),
            "head.prior_prob" => h.prior_prob.to_string(),
            "msda.heads" => h.msda.heads.to_string(),
            "msda.levels" => h.msda.levels.to_string(),
            "msda.points" => h.msda.points.to_string(),
            "match.scheme" => m.scheme.to_string(),
            "match.k" => m.k.to_string(),
            "match.pos_thr" => m.pos_thr.to_string(),
            "match.neg_thr" => m.neg_thr.to_string(),
            "match.cost_class" => m.cost_class.to_string(),
            "match.cost_l1" => m.cost_l1.to_string(),
            "match.cost_giou" => m.cost_giou.to_string(),
            "loss.alpha" => self.loss.focal.alpha.to_string(),
            "loss.gamma" => self.loss.focal.gamma.to_string(),
            "loss.cls" => self.loss.weights.cls.to_string(),
            "loss.l1" => self.loss.weights.l1.to_string(),
            "loss.giou" => self.loss.weights.giou.to_string(),
            "optim.lr" => o.adamw.lr.to_string(),
            "optim.slow_lr_mult" => o.adamw.slow_lr_mult.to_string(),
            "optim.weight_decay" => o.adamw.weight_decay.to_string(),
            "optim.beta1" => o.adamw.beta1.to_string(),
            "optim.beta2" => o.adamw.beta2.to_string(),
            "optim.eps" => o.adamw.eps.to_string(),
            "optim.epochs" => o.epochs.to_string(),
            "optim.batch" => o.batch.to_string(),
            "optim.drop1" => o.drops[0].to_string(),
            "optim.drop2" => o.drops[1].to_string(),
            "optim.drop_factor" => o.drop_factor.to_string(),
            "optim.clip_norm" => o.clip_norm.to_string(),
            "eval.strategy" => self.eval.strategy.to_string(),
            "eval.nms" => self.eval.infer.nms_threshold.to_string(),
            "eval.max_dets" => self.eval.infer.max_detections.to_string(),
            "eval.every" => self.eval.every.to_string(),
            "eval.by_area" => self.eval.by_area.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let h = &mut self.head;
        let m = &mut self.matcher;
        let o = &mut self.optim;
        let s = &mut self.scene;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.width" => s.width = parse(key, v)?,
            "data.height" => s.height = parse(key, v)?,
            "data.min_objects" => s.min_objects = parse(key, v)?,
            "data.max_objects" => s.max_objects = parse(key, v)?,
            "data.classes" => s.num_classes = parse(key, v)?,
            "data.min_size" => s.min_size = parse(key, v)?,
            "data.max_size" => s.max_size = parse(key, v)?,
            "data.color_jitter" => s.color_jitter = parse(key, v)?,
            "data.noise" => s.noise = parse(key, v)?,
            "data.seed" => s.seed = parse(key, v)?,
            "data.train" => self.splits.train = parse(key, v)?,
            "data.val" => self.splits.val = parse(key, v)?,
            "data.hflip" => self.hflip = parse(key, v)?,
            "data.stem_channels" => self.stem_channels = parse(key, v)?,
            "head.queries" => h.num_queries = parse(key, v)?,
            "head.layers" => h.layers = parse(key, v)?,
            "head.dim" => h.dim = parse(key, v)?,
            "head.ffn" => h.ffn_dim = parse(key, v)?,
            "head.attn_heads" => h.attn_heads = parse(key, v)?,
            "head.backbone_dim" => h.backbone_dim = parse(key, v)?,
            "head.anchor_sizes" => self.anchor_sizes = parse(key, v)?,
            "head.anchor_ratios" => self.anchor_ratios = parse(key, v)?,
            "head.anchor_base" => self.anchor_base = parse(key, v)?,
            "head.select_k" => h.select_k = parse(key, v)?,
            "head.aux_losses" => h.aux_losses = parse(key, v)?,
            "head.shared_heads" => h.shared_heads = parse(key, v)?,
            "head.ibbr" => h.ibbr = parse(key, v)?,
            "head.prior_prob" => h.prior_prob = parse(key, v)?,
            "msda.heads" => h.msda.heads = parse(key, v)?,
            "msda.levels" => h.msda.levels = parse(key, v)?,
            "msda.points" => h.msda.points = parse(key, v)?,
            "match.scheme" => m.scheme = v.parse::<MatchScheme>()?,
            "match.k" => m.k = parse(key, v)?,
            "match.pos_thr" => m.pos_thr = parse(key, v)?,
            "match.neg_thr" => m.neg_thr = parse(key, v)?,
            "match.cost_class" => m.cost_class = parse(key, v)?,
            "match.cost_l1" => m.cost_l1 = parse(key, v)?,
            "match.cost_giou" => m.cost_giou = parse(key, v)?,
            "loss.alpha" => self.loss.focal.alpha = parse(key, v)?,
            "loss.gamma" => self.loss.focal.gamma = parse(key, v)?,
            "loss.cls" => self.loss.weights.cls = parse(key, v)?,
            "loss.l1" => self.loss.weights.l1 = parse(key, v)?,
            "loss.giou" => self.loss.weights.giou = parse(key, v)?,
            "optim.lr" => o.adamw.lr = parse(key, v)?,
            "optim.slow_lr_mult" => o.adamw.slow_lr_mult = parse(key, v)?,
            "optim.weight_decay" => o.adamw.weight_decay = parse(key, v)?,
            "optim.beta1" => o.adamw.beta1 = parse(key, v)?,
            "optim.beta2" => o.adamw.beta2 = parse(key, v)?,
            "optim.eps" => o.adamw.eps = parse(key, v)?,
            "optim.epochs" => o.epochs = parse(key, v)?,
            "optim.batch" => o.batch = parse(key, v)?,
            "optim.drop1" => o.drops[0] = parse(key, v)?,
            "optim.drop2" => o.drops[1] = parse(key, v)?,
            "optim.drop_factor" => o.drop_factor = parse(key, v)?,
            "optim.clip_norm" => o.clip_norm = parse(key, v)?,
            "eval.strategy" => self.eval.strategy = v.parse::<Strategy>()?,
            "eval.nms" => self.eval.infer.nms_threshold = parse(key, v)?,
            "eval.max_dets" => self.eval.infer.max_detections = parse(key, v)?,
            "eval.every" => self.eval.every = parse(key, v)?,
            "eval.by_area" => self.eval.by_area = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        self.sync();
        Ok(())
    }

    /// Applies `key=value` text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_assignment(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_assignment(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{kv}`")))?;
        self.set(k.trim(), v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Defaults, then the optional file, then `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            c.apply_text(&text)?;
        }
        for kv in overrides {
            c.apply_assignment(kv)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let v = self.get(k).expect("every listed key resolves");
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.splits.train == 0 || self.splits.val == 0 {
            return Err(Error::Config("data.train and data.val must be positive".into()));
        }
        if !(1..=3).contains(&self.anchor_sizes) || !(1..=3).contains(&self.anchor_ratios) {
            return Err(Error::Config("anchor sizes and ratios must be in 1..=3".into()));
        }
        if !(self.anchor_base > 0.0) {
            return Err(Error::Config("head.anchor_base must be positive".into()));
        }
        self.matcher.validate()?;
        self.loss.focal.validate()?;
        self.loss.weights.validate()?;
        let o = &self.optim;
        if o.epochs == 0 || o.batch == 0 || self.eval.every == 0 {
            return Err(Error::Config("optim.epochs, optim.batch and eval.every must be positive".into()));
        }
        if !(o.adamw.lr > 0.0) || !(o.adamw.slow_lr_mult > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0 < o.drops[0] && o.drops[0] <= o.drops[1]) || !(o.drop_factor > 0.0) || !(o.clip_norm >= 0.0) {
            return Err(Error::Config("invalid learning-rate schedule".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.infer.nms_threshold) || self.eval.infer.max_detections == 0 {
            return Err(Error::Config("eval.nms must lie in [0, 1] and eval.max_dets be positive".into()));
        }
        let model = self.model();
        model.validate()?;
        if self.head.num_queries > self.num_anchors() {
            return Err(Error::Config(format!(
                "head.queries {} exceeds the {} feature-anchor combinations",
                self.head.num_queries,
                self.num_anchors()
            )));
        }
        Ok(())
    }

    fn num_anchors(&self) -> usize {
        let types = self.anchor_sizes * self.anchor_ratios;
        (0..self.head.msda.levels)
            .map(|i| {
                let s = 1usize << (i + 3);
                (self.scene.width / s) * (self.scene.height / s) * types
            })
            .sum()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image: self.scene.image_size(),
            backbone: BackboneConfig {
                channels: self.head.backbone_dim,
                stem_channels: self.stem_channels,
                levels: self.head.msda.levels,
            },
            head: self.head.clone(),
        }
    }

    pub fn focal(&self) -> FocalParams {
        self.loss.focal
    }

    /// The configuration with the L1+GIoU box loss and its class weight.
    pub fn with_giou_loss(mut self) -> Self {
        self.loss.weights = LossWeights::with_giou();
        self
    }
}
