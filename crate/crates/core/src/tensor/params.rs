use std::ops::{Deref, DerefMut};

use rand::Rng;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Base,
    /// Trained at a reduced learning rate (backbone, sampling-offset projections).
    Slow,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    group: ParamGroup,
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name, value, group });
        ParamId(self.entries.len() - 1)
    }

    /// Weight of shape `[fan_in, fan_out]` drawn from `uniform(±1/√fan_in)`.
    pub fn add_linear_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng);
        self.add(name, t, group)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Scalar parameter count of every entry whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replaces values from `(name, tensor)` pairs. Every parameter must be
    /// present with a matching shape.
    pub fn load_named<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor>) -> Result<()> {
        for e in &mut self.entries {
            let t = lookup(&e.name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter `{}`", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(Error::Shape {
                    op: "load_params",
                    shapes: vec![e.value.shape().to_vec(), t.shape().to_vec()],
                });
            }
            e.value = t.clone();
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }
}

/// A tape bound to a parameter store: parameters enter the tape lazily as
/// gradient-tracking leaves the first time they are read.
pub struct Graph<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, train: bool) -> Self {
        Self::with_tape(store, Tape::new(), train)
    }

    pub fn with_tape(store: &'p ParamStore, tape: Tape, train: bool) -> Self {
        Graph {
            tape,
            store,
            bound: vec![None; store.len()],
            train,
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.train);
        self.bound[id.0] = Some(v);
        v
    }

    /// Runs backward from `loss` and returns one gradient per parameter
    /// (zeros for parameters the loss never touched).
    pub fn param_grads(&mut self, loss: Var) -> Result<Vec<Vec<f64>>> {
        let mut grads: Gradients = self.tape.backward(loss)?;
        Ok(self
            .store
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| vec![0.0; self.store.get(id).numel()])
            })
            .collect())
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
