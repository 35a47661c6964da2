//! Strided convolution stack producing a feature pyramid from an RGB image.
//!
//! A 4×4 stride-4 stem and one 3×3 convolution reach stride 4; each pyramid
//! level is then a 3×3 stride-2 convolution of the previous one, so level
//! `P(3 + i)` has stride `2^(3 + i)`. Every convolution is followed by ReLU.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::LevelShape;
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Channels of every pyramid level.
    pub channels: usize,
    /// Channels at stride 4.
    pub stem_channels: usize,
    /// Number of pyramid levels, starting at P3.
    pub levels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: 64,
            stem_channels: 32,
            levels: 3,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        (cin, cout): (usize, usize),
        (k, stride, pad): (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        let weight = store.add_linear_weight(format!("{name}.weight"), k * k * cin, cout, ParamGroup::Slow, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamGroup::Slow);
        Conv {
            weight,
            bias,
            k,
            stride,
            pad,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.conv2d(x, w, self.k, self.stride, self.pad)?;
        let y = g.add(y, b)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv,
    mid: Conv,
    levels: Vec<Conv>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: BackboneConfig, rng: &mut R) -> Result<Self> {
        if config.levels == 0 || config.channels == 0 || config.stem_channels == 0 {
            return Err(Error::Config(format!("degenerate backbone {config:?}")));
        }
        let s = config.stem_channels;
        let stem = Conv::new(store, "backbone.stem", (3, s), (4, 4, 0), rng);
        let mid = Conv::new(store, "backbone.mid", (s, s), (3, 1, 1), rng);
        let mut levels = Vec::with_capacity(config.levels);
        let mut cin = s;
        for i in 0..config.levels {
            levels.push(Conv::new(
                store,
                &format!("backbone.p{}", i + 3),
                (cin, config.channels),
                (3, 2, 1),
                rng,
            ));
            cin = config.channels;
        }
        Ok(Backbone {
            config,
            stem,
            mid,
            levels,
        })
    }

    pub fn strides(&self) -> Vec<usize> {
        (0..self.config.levels).map(|i| 1 << (i + 3)).collect()
    }

    /// Level shapes for an `height × width` input, or an error when the size
    /// is not divisible by the coarsest stride.
    pub fn level_shapes(&self, height: usize, width: usize) -> Result<Vec<LevelShape>> {
        let coarsest = *self.strides().last().expect("at least one level");
        if height == 0 || width == 0 || height % coarsest != 0 || width % coarsest != 0 {
            return Err(Error::invalid(
                "backbone",
                format!("{height}×{width} input is not divisible by stride {coarsest}"),
            ));
        }
        Ok(self
            .strides()
            .into_iter()
            .map(|s| LevelShape {
                h: height / s,
                w: width / s,
                stride: s,
            })
            .collect())
    }

    /// `[H, W, 3]` image in `[0, 1]` → one `[H_l, W_l, C]` map per level.
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        let shape = g.shape(image).to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::shape("backbone", &[&shape]));
        }
        self.level_shapes(shape[0], shape[1])?;
        let x = g.add_scalar(image, -0.5);
        let x = self.stem.forward(g, x)?;
        let mut x = self.mid.forward(g, x)?;
        let mut out = Vec::with_capacity(self.levels.len());
        for conv in &self.levels {
            x = conv.forward(g, x)?;
            out.push(x);
        }
        Ok(out)
    }
}
