//! Multi-scale deformable cross-attention in the reference frame of a box
//! prior.
//!
//! For query `q` with reference box `(cx, cy, w, h)`, head `m` samples level
//! `l` at `K` image-pixel locations `(cx + Δx·w/2, cy + Δy·h/2)` and mixes
//! them with a softmax over that head's `L·K` logits. Pixel `p` maps to the
//! level grid coordinate `p / stride − 0.5`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::BoxCWH;
use crate::nn::Linear;
use crate::tensor::{Graph, LevelSpan, ParamGroup, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingSpec {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl SamplingSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads * self.levels * self.points == 0 {
            return Err(Error::Config(format!("degenerate sampling spec {self:?}")));
        }
        if dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dimension {dim} is not divisible by {} attention heads",
                self.heads
            )));
        }
        Ok(())
    }

    /// Sampling points per query, `M·L·K`.
    pub fn samples(&self) -> usize {
        self.heads * self.levels * self.points
    }

    /// Parameters of the offset and attention-logit projections of a query
    /// of width `dim`.
    pub fn projection_params(&self, dim: usize) -> usize {
        (dim + 1) * self.samples() * 3
    }
}

/// Pyramid features prepared for cross-attention: all levels stacked as
/// `[S, D_b]` rows together with their layout and strides.
#[derive(Clone, Debug)]
pub struct PyramidInput {
    pub features: Var,
    pub spans: Vec<LevelSpan>,
    pub strides: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MsdaLayer {
    pub spec: SamplingSpec,
    pub dim: usize,
    pub offsets: Linear,
    pub logits: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MsdaLayer {
    /// Offsets and logits start at zero, so a fresh layer samples every box
    /// center with uniform weights. Offsets train in the slow group.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        value_dim: usize,
        spec: SamplingSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate(dim)?;
        let s = spec.samples();
        Ok(MsdaLayer {
            spec,
            dim,
            offsets: Linear::zeroed(store, &format!("{name}.offsets"), dim, 2 * s, ParamGroup::Slow),
            logits: Linear::zeroed(store, &format!("{name}.logits"), dim, s, ParamGroup::Base),
            value: Linear::new(store, &format!("{name}.value"), value_dim, dim, ParamGroup::Base, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, ParamGroup::Base, rng),
        })
    }

    /// Attends `query` (`[Q, D]`) over the pyramid; `refs` holds one box per
    /// query. Returns `[Q, D]`.
    pub fn forward(&self, g: &mut Graph, query: Var, pyramid: &PyramidInput, refs: &[BoxCWH]) -> Result<Var> {
        let q = g.shape(query)[0];
        let SamplingSpec {
            heads: m,
            levels: l,
            points: k,
        } = self.spec;
        if refs.len() != q || pyramid.spans.len() != l || pyramid.strides.len() != l {
            return Err(Error::invalid(
                "msda",
                format!(
                    "{q} queries, {} reference boxes, {} levels for a {l}-level spec",
                    refs.len(),
                    pyramid.spans.len()
                ),
            ));
        }
        let off = self.offsets.forward(g, query)?;
        let off = g.reshape(off, &[q, m, l, k, 2])?;
        let (scale, shift) = frame_affine(refs, &self.spec, &pyramid.strides);
        let scale = g.constant(scale);
        let shift = g.constant(shift);
        let locs = g.mul(off, scale)?;
        let locs = g.add(locs, shift)?;

        let a = self.logits.forward(g, query)?;
        let a = g.reshape(a, &[q, m, l * k])?;
        let a = g.softmax(a, 2)?;
        let a = g.reshape(a, &[q, m, l, k])?;

        let v = self.value.forward(g, pyramid.features)?;
        let o = g.ms_deform_attn(v, locs, a, &pyramid.spans, m)?;
        self.output.forward(g, o)
    }
}

/// Per-sample scale and shift, `[Q, M, L, K, 2]` each, that map an offset in
/// box units to a level-grid coordinate.
fn frame_affine(refs: &[BoxCWH], spec: &SamplingSpec, strides: &[f64]) -> (Tensor, Tensor) {
    let shape = [refs.len(), spec.heads, spec.levels, spec.points, 2];
    let n: usize = shape.iter().product();
    let mut scale = Vec::with_capacity(n);
    let mut shift = Vec::with_capacity(n);
    for r in refs {
        for _ in 0..spec.heads {
            for &s in strides {
                for _ in 0..spec.points {
                    scale.push(r.w / 2.0 / s);
                    scale.push(r.h / 2.0 / s);
                    shift.push(r.cx / s - 0.5);
                    shift.push(r.cy / s - 0.5);
                }
            }
        }
    }
    (
        Tensor::new(&shape, scale).expect("consistent frame shape"),
        Tensor::new(&shape, shift).expect("consistent frame shape"),
    )
}

/// Image-pixel sampling locations for raw offsets laid out `[M, L, K, 2]`
/// around one reference box.
pub fn sample_locations(offsets: &[f64], r: &BoxCWH) -> Vec<(f64, f64)> {
    offsets
        .chunks_exact(2)
        .map(|d| (r.cx + d[0] * r.w / 2.0, r.cy + d[1] * r.h / 2.0))
        .collect()
}

/// Level-grid coordinate of an image-pixel position.
pub fn to_level(p: f64, stride: f64) -> f64 {
    p / stride - 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(store: &mut ParamStore, lin: &Linear, dim: usize) {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        *store.get_mut(lin.weight) = Tensor::new(&[dim, dim], w).unwrap();
    }

    #[test]
    fn constant_map_with_identity_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let spec = SamplingSpec {
            heads: 1,
            levels: 1,
            points: 1,
        };
        let layer = MsdaLayer::new(&mut store, "x", 2, 2, spec, &mut rng).unwrap();
        identity(&mut store, &layer.value, 2);
        identity(&mut store, &layer.output, 2);
        let mut g = Graph::new(&store, false);
        let features = g.constant(Tensor::full(&[16, 2], 0.75));
        let pyr = PyramidInput {
            features,
            spans: vec![LevelSpan { h: 4, w: 4, start: 0 }],
            strides: vec![8.0],
        };
        let query = g.constant(Tensor::uniform(&[1, 2], -1.0, 1.0, &mut rng));
        let r = BoxCWH::try_new(13.0, 17.0, 10.0, 6.0).unwrap();
        let y = layer.forward(&mut g, query, &pyr, &[r]).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn offsets_scale_with_box_width() {
        let r = BoxCWH::try_new(40.0, 40.0, 16.0, 8.0).unwrap();
        let wide = BoxCWH { w: 48.0, ..r };
        let off = [0.3, -0.7, -1.2, 0.4];
        let a = sample_locations(&off, &r);
        let b = sample_locations(&off, &wide);
        for (p, q) in a.iter().zip(&b) {
            assert!((q.0 - wide.cx - 3.0 * (p.0 - r.cx)).abs() < 1e-12);
            assert_eq!(q.1, p.1);
        }
    }
}
