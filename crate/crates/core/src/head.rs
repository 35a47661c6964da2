//! The two-stage head: a selector scoring every feature-anchor combination,
//! per-anchor-type transition networks, a pre-norm decoder with deformable
//! cross-attention around the anchor boxes, and classification and box
//! prediction networks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{decode_box_unclipped, AnchorConfig, AnchorSet, BoxCWH, BoxDelta, BoxXYXY, ImageSize};
use crate::msda::{MsdaLayer, PyramidInput, SamplingSpec};
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention, LN_EPS};
use crate::tensor::{top_k_indices, Graph, LevelSpan, ParamGroup, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub num_queries: usize,
    pub layers: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub attn_heads: usize,
    pub num_classes: usize,
    /// Channels of the incoming pyramid.
    pub backbone_dim: usize,
    pub msda: SamplingSpec,
    pub anchors: AnchorConfig,
    /// Stage-1 top-k.
    pub select_k: usize,
    pub aux_losses: bool,
    pub shared_heads: bool,
    pub ibbr: bool,
    /// Initial foreground probability of the selector and class logits.
    pub prior_prob: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            num_queries: 50,
            layers: 2,
            dim: 64,
            ffn_dim: 256,
            attn_heads: 8,
            num_classes: 3,
            backbone_dim: 64,
            msda: SamplingSpec {
                heads: 8,
                levels: 3,
                points: 4,
            },
            anchors: AnchorConfig::default(),
            select_k: 5,
            aux_losses: false,
            shared_heads: true,
            ibbr: false,
            prior_prob: 0.01,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("head.queries", self.num_queries),
            ("head.layers", self.layers),
            ("head.dim", self.dim),
            ("head.ffn", self.ffn_dim),
            ("head.attn_heads", self.attn_heads),
            ("head.classes", self.num_classes),
            ("head.backbone_dim", self.backbone_dim),
            ("head.select_k", self.select_k),
        ];
        if let Some((k, _)) = pos.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.ibbr && !self.aux_losses {
            return Err(Error::Config(
                "head.ibbr requires head.aux_losses (refinement needs per-layer predictions)".into(),
            ));
        }
        if self.backbone_dim % 4 != 0 {
            return Err(Error::Config("head.backbone_dim must be divisible by 4".into()));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(Error::Config("head.prior_prob must lie in (0, 1)".into()));
        }
        self.msda.validate(self.dim)?;
        if self.dim % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "head.dim {} is not divisible by head.attn_heads {}",
                self.dim, self.attn_heads
            )));
        }
        Ok(())
    }

    /// Number of prediction-head pairs.
    pub fn prediction_pairs(&self) -> usize {
        if self.aux_losses && !self.shared_heads {
            self.layers
        } else {
            1
        }
    }
}

/// Bottleneck block shared by all levels followed by a per-location linear
/// layer with one score per anchor type.
#[derive(Clone, Debug)]
pub struct Selector {
    reduce: Linear,
    conv_w: ParamId,
    conv_b: ParamId,
    expand: Linear,
    out: Linear,
    mid: usize,
}

impl Selector {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &HeadConfig, rng: &mut R) -> Self {
        let d = cfg.backbone_dim;
        let mid = d / 4;
        let g = ParamGroup::Base;
        let reduce = Linear::new(store, "head.selector.reduce", d, mid, g, rng);
        let conv_w = store.add_linear_weight("head.selector.conv.weight", 9 * mid, mid, g, rng);
        let conv_b = store.add("head.selector.conv.bias", Tensor::zeros(&[mid]), g);
        let expand = Linear::new(store, "head.selector.expand", mid, d, g, rng);
        let out = Linear::new(store, "head.selector.out", d, cfg.anchors.num_types(), g, rng);
        let bias = prior_bias(cfg.prior_prob);
        store.get_mut(out.bias).data_mut().fill(bias);
        Selector {
            reduce,
            conv_w,
            conv_b,
            expand,
            out,
            mid,
        }
    }

    /// Scores of one `[H, W, D_b]` level as `[H·W·A]`, row-major then type.
    fn level(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (h, w, d) = (s[0], s[1], s[2]);
        let flat = g.reshape(x, &[h * w, d])?;
        let y = self.reduce.forward(g, flat)?;
        let y = g.relu(y);
        let y = g.reshape(y, &[h, w, self.mid])?;
        let cw = g.param(self.conv_w);
        let cb = g.param(self.conv_b);
        let y = g.conv2d(y, cw, 3, 1, 1)?;
        let y = g.add(y, cb)?;
        let y = g.relu(y);
        let y = g.reshape(y, &[h * w, self.mid])?;
        let y = self.expand.forward(g, y)?;
        let y = g.add(y, flat)?;
        let y = g.relu(y);
        let y = self.out.forward(g, y)?;
        let n = g.value(y).numel();
        g.reshape(y, &[n])
    }

    /// Scores for every anchor, in anchor flat order.
    pub fn forward(&self, g: &mut Graph, pyramid: &[Var]) -> Result<Var> {
        let parts = pyramid
            .iter()
            .map(|&p| self.level(g, p))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&parts, 0)
    }
}

/// Logit whose sigmoid is `p`.
pub fn prior_bias(p: f64) -> f64 {
    -((1.0 - p) / p).ln()
}

/// A selected feature-anchor combination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Query {
    /// Flat anchor index.
    pub flat: usize,
    /// Row of the query's feature in the stacked pyramid.
    pub location: usize,
    pub anchor: BoxXYXY,
    pub anchor_type: usize,
    pub score: f64,
}

/// Global top-`num_queries` feature-anchor combinations by score, highest
/// first, ties to the lower flat index.
pub fn select_queries(scores: &[f64], anchors: &AnchorSet, num_queries: usize) -> Result<Vec<Query>> {
    if scores.len() != anchors.len() {
        return Err(Error::invalid(
            "select_queries",
            format!("{} scores for {} anchors", scores.len(), anchors.len()),
        ));
    }
    if num_queries == 0 || num_queries > scores.len() {
        return Err(Error::invalid(
            "select_queries",
            format!("{num_queries} queries from {} combinations", scores.len()),
        ));
    }
    let a = anchors.num_types();
    Ok(top_k_indices(scores, num_queries)
        .into_iter()
        .map(|flat| Query {
            flat,
            location: flat / a,
            anchor: anchors.get(flat),
            anchor_type: flat % a,
            score: scores[flat],
        })
        .collect())
}

/// One LayerNorm → ReLU → Linear network per anchor type, stored stacked.
#[derive(Clone, Debug)]
pub struct Transition {
    gamma: ParamId,
    beta: ParamId,
    weight: ParamId,
    bias: ParamId,
    types: usize,
    din: usize,
    dout: usize,
}

impl Transition {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, types: usize, din: usize, dout: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Base;
        let bound = 1.0 / (din as f64).sqrt();
        Transition {
            gamma: store.add("head.transition.gamma", Tensor::full(&[types, din], 1.0), g),
            beta: store.add("head.transition.beta", Tensor::zeros(&[types, din]), g),
            weight: store.add(
                "head.transition.weight",
                Tensor::uniform(&[types, din, dout], -bound, bound, rng),
                g,
            ),
            bias: store.add("head.transition.bias", Tensor::zeros(&[types, dout]), g),
            types,
            din,
            dout,
        }
    }

    pub fn num_params(&self) -> usize {
        self.types * (2 * self.din + self.din * self.dout + self.dout)
    }

    /// `[Q, D_b]` features with one anchor type each → `[Q, D]`.
    pub fn forward(&self, g: &mut Graph, x: Var, types: &[usize]) -> Result<Var> {
        if let Some(&t) = types.iter().find(|&&t| t >= self.types) {
            return Err(Error::invalid(
                "transition",
                format!("anchor type {t} of {}", self.types),
            ));
        }
        let q = types.len();
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let weight = g.param(self.weight);
        let bias = g.param(self.bias);
        let gamma = g.index_select(gamma, types)?;
        let beta = g.index_select(beta, types)?;
        let weight = g.index_select(weight, types)?;
        let bias = g.index_select(bias, types)?;
        let n = g.layer_norm(x, LN_EPS)?;
        let n = g.mul(n, gamma)?;
        let n = g.add(n, beta)?;
        let n = g.relu(n);
        let n = g.reshape(n, &[q, 1, self.din])?;
        let y = g.matmul(n, weight)?;
        let y = g.reshape(y, &[q, self.dout])?;
        g.add(y, bias)
    }
}

/// Image-normalized `(cx, cy, w, h)` of each box, `[Q, 4]`.
pub fn normalized_cwh(boxes: &[BoxCWH], image: ImageSize) -> Tensor {
    let (w, h) = (image.width as f64, image.height as f64);
    let data = boxes
        .iter()
        .flat_map(|b| [b.cx / w, b.cy / h, b.w / w, b.h / h])
        .collect();
    Tensor::new(&[boxes.len(), 4], data).expect("four values per box")
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    ln_cross: LayerNorm,
    cross: MsdaLayer,
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: Mlp,
}

impl DecoderLayer {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, i: usize, cfg: &HeadConfig, rng: &mut R) -> Result<Self> {
        let p = format!("head.decoder{i}");
        let (d, g) = (cfg.dim, ParamGroup::Base);
        Ok(DecoderLayer {
            ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), d, g),
            cross: MsdaLayer::new(store, &format!("{p}.cross"), d, cfg.backbone_dim, cfg.msda, rng)?,
            ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), d, g),
            self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, cfg.attn_heads, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d, g),
            ffn: Mlp::new(store, &format!("{p}.ffn"), [d, cfg.ffn_dim, d], g, rng),
        })
    }

    /// One pre-norm layer; `enc` is added at the inputs of both attention
    /// branches only.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        enc: Var,
        pyramid: &PyramidInput,
        refs: &[BoxCWH],
    ) -> Result<Var> {
        let h = self.ln_cross.forward(g, x)?;
        let h = g.add(h, enc)?;
        let h = self.cross.forward(g, h, pyramid, refs)?;
        let x = g.add(x, h)?;
        let h = self.ln_self.forward(g, x)?;
        let h = g.add(h, enc)?;
        let h = self.self_attn.forward(g, h, h)?;
        let x = g.add(x, h)?;
        let h = self.ln_ffn.forward(g, x)?;
        let h = self.ffn.forward(g, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct PredictionHeads {
    pub cls: Mlp,
    pub bbox: Mlp,
}

/// Per-query outputs of one prediction pair.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    /// `[Q, C + 1]`, non-object last.
    pub logits: Var,
    /// `[Q, 4]` deltas relative to `refs`.
    pub deltas: Var,
    /// Reference boxes this layer attended around and predicts against.
    pub refs: Vec<BoxCWH>,
}

#[derive(Clone, Debug)]
pub struct HeadForward {
    /// `[N]` selection logits in anchor flat order.
    pub scores: Var,
    pub queries: Vec<Query>,
    /// One entry per prediction set: every layer with auxiliary losses,
    /// otherwise only the last.
    pub outputs: Vec<LayerOutput>,
    /// Reference boxes used by each decoder layer.
    pub refs_per_layer: Vec<Vec<BoxCWH>>,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub config: HeadConfig,
    pub selector: Selector,
    pub transition: Transition,
    pub anchor_enc: Mlp,
    pub layers: Vec<DecoderLayer>,
    pub predictors: Vec<PredictionHeads>,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: HeadConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let g = ParamGroup::Base;
        let selector = Selector::new(store, c, rng);
        let transition = Transition::new(store, c.anchors.num_types(), c.backbone_dim, c.dim, rng);
        let anchor_enc = Mlp::new(store, "head.anchor_enc", [4, c.dim, c.dim], g, rng);
        let layers = (0..c.layers)
            .map(|i| DecoderLayer::new(store, i, c, rng))
            .collect::<Result<Vec<_>>>()?;
        let bias = prior_bias(c.prior_prob);
        let predictors = (0..c.prediction_pairs())
            .map(|i| {
                let cls = Mlp::new(store, &format!("head.pred{i}.cls"), [c.dim, c.dim, c.num_classes + 1], g, rng);
                store.get_mut(cls.fc2.bias).data_mut().fill(bias);
                let bbox = Mlp::new(store, &format!("head.pred{i}.box"), [c.dim, c.dim, 4], g, rng);
                PredictionHeads { cls, bbox }
            })
            .collect();
        Ok(Head {
            config,
            selector,
            transition,
            anchor_enc,
            layers,
            predictors,
        })
    }

    fn predictor(&self, layer: usize) -> &PredictionHeads {
        &self.predictors[layer.min(self.predictors.len() - 1)]
    }

    /// Class logits and box deltas for decoder output `x`.
    pub fn predict(&self, g: &mut Graph, x: Var, layer: usize) -> Result<(Var, Var)> {
        let p = self.predictor(layer);
        let logits = p.cls.forward(g, x)?;
        let deltas = p.bbox.forward(g, x)?;
        Ok((logits, deltas))
    }

    fn encode_anchors(&self, g: &mut Graph, refs: &[BoxCWH], image: ImageSize) -> Result<Var> {
        let a = g.constant(normalized_cwh(refs, image));
        self.anchor_enc.forward(g, a)
    }

    /// Runs both stages on one image's pyramid.
    pub fn forward(
        &self,
        g: &mut Graph,
        pyramid: &[Var],
        anchors: &AnchorSet,
        strides: &[usize],
        image: ImageSize,
    ) -> Result<HeadForward> {
        let c = &self.config;
        if pyramid.len() != c.msda.levels || strides.len() != pyramid.len() {
            return Err(Error::invalid(
                "head",
                format!(
                    "{} pyramid levels, {} strides, head expects {}",
                    pyramid.len(),
                    strides.len(),
                    c.msda.levels
                ),
            ));
        }
        let scores = self.selector.forward(g, pyramid)?;
        let queries = select_queries(g.value(scores).data(), anchors, c.num_queries)?;

        let mut spans = Vec::with_capacity(pyramid.len());
        let mut rows = Vec::with_capacity(pyramid.len());
        let mut start = 0;
        for &p in pyramid {
            let s = g.shape(p).to_vec();
            spans.push(LevelSpan { h: s[0], w: s[1], start });
            start += s[0] * s[1];
            rows.push(g.reshape(p, &[s[0] * s[1], s[2]])?);
        }
        let stacked = g.concat(&rows, 0)?;
        let pyr = PyramidInput {
            features: stacked,
            spans,
            strides: strides.iter().map(|&s| s as f64).collect(),
        };

        let locations: Vec<usize> = queries.iter().map(|q| q.location).collect();
        let types: Vec<usize> = queries.iter().map(|q| q.anchor_type).collect();
        let feats = g.index_select(stacked, &locations)?;
        let mut x = self.transition.forward(g, feats, &types)?;

        let mut refs: Vec<BoxCWH> = queries.iter().map(|q| q.anchor.to_cwh()).collect();
        let mut enc = self.encode_anchors(g, &refs, image)?;
        let mut outputs = Vec::new();
        let mut refs_per_layer = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x, enc, &pyr, &refs)?;
            refs_per_layer.push(refs.clone());
            let last = i + 1 == self.layers.len();
            if c.aux_losses || last {
                let (logits, deltas) = self.predict(g, x, i)?;
                outputs.push(LayerOutput {
                    logits,
                    deltas,
                    refs: refs.clone(),
                });
                if c.ibbr && !last {
                    // The refined boxes are constants: no gradient through the update.
                    refs = refine_boxes(g.value(deltas).data(), &refs);
                    enc = self.encode_anchors(g, &refs, image)?;
                }
            }
        }
        Ok(HeadForward {
            scores,
            queries,
            outputs,
            refs_per_layer,
        })
    }
}

/// Next-layer reference boxes from predicted deltas (unclipped decode).
pub fn refine_boxes(deltas: &[f64], refs: &[BoxCWH]) -> Vec<BoxCWH> {
    refs.iter()
        .zip(deltas.chunks_exact(4))
        .map(|(r, d)| {
            let b = decode_box_unclipped(&BoxDelta::from_array([d[0], d[1], d[2], d[3]]), &r.to_xyxy());
            b.to_cwh()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LevelShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn selection_is_global_top_k_with_low_index_ties() {
        let levels = [LevelShape { h: 1, w: 2, stride: 8 }];
        let anchors = AnchorSet::generate(&levels, &AnchorConfig::grid(1, 1)).unwrap();
        let q = select_queries(&[0.5, 0.5], &anchors, 1).unwrap();
        assert_eq!(q[0].flat, 0);
        assert_eq!(select_queries(&[0.1, 0.9], &anchors, 2).unwrap()[0].flat, 1);
        assert!(select_queries(&[0.1, 0.9], &anchors, 3).is_err());
    }

    #[test]
    fn ibbr_requires_aux() {
        let cfg = HeadConfig {
            ibbr: true,
            aux_losses: false,
            ..HeadConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn transition_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let t = Transition::new(&mut store, 9, 16, 8, &mut rng);
        assert_eq!(store.count_prefix("head.transition"), 9 * (2 * 16 + 16 * 8 + 8));
        assert_eq!(t.num_params(), store.count());
    }
}
