//! Parameterized layers built on [`Graph`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// `y = x·W + b` over the last axis, `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_linear_weight(format!("{name}.weight"), fan_in, fan_out, group, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), group);
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Linear layer with all-zero weight and bias.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, group: ParamGroup) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]), group);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), group);
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn num_params(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), group),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul(n, gamma)?;
        g.add(y, beta)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], group, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims[1], dims[2], group, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention over a set of `N` tokens.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dimension {dim} is not divisible by {heads} heads"
            )));
        }
        let g = ParamGroup::Base;
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, g, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, g, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, g, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, g, rng),
            heads,
            dim,
        })
    }

    /// `[N, D]` → `[H, N, D/H]`.
    fn split(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let x = g.reshape(x, &[n, self.heads, self.dim / self.heads])?;
        g.permute(x, &[1, 0, 2])
    }

    /// Queries and keys come from `qk`, values from `v`; both `[N, D]`.
    pub fn forward(&self, g: &mut Graph, qk: Var, v: Var) -> Result<Var> {
        let n = g.shape(qk)[0];
        let q = self.q.forward(g, qk)?;
        let k = self.k.forward(g, qk)?;
        let val = self.v.forward(g, v)?;
        let q = self.split(g, q)?;
        let k = self.split(g, k)?;
        let val = self.split(g, val)?;
        let s = g.matmul_t(q, k)?;
        let s = g.scale(s, 1.0 / ((self.dim / self.heads) as f64).sqrt());
        let a = g.softmax(s, 2)?;
        let o = g.matmul(a, val)?;
        let o = g.permute(o, &[1, 0, 2])?;
        let o = g.reshape(o, &[n, self.dim])?;
        self.out.forward(g, o)
    }
}
