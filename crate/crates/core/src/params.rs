//! Named parameter storage with matching gradient buffers.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Uniform in `±bound`.
    Uniform(f64),
}

impl Init {
    /// `±√(1/fan_in)`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform((1.0 / fan_in as f64).sqrt())
    }
}

/// Parameters keyed by dot-separated path, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Panics on a duplicate name.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.gen_range(-b..=b)).collect(),
        };
        self.insert(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| &self.values[id.0])
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grads(&mut self, grads: &ParamGrads) {
        for (g, d) in self.grads.iter_mut().zip(&grads.0) {
            g.add_assign(d);
        }
    }

    /// Replaces every value whose name appears in `other`; shapes must match.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for (name, t) in other {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if t.shape() != self.values[id.0].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = t.clone();
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!("missing tensor {}", self.names[missing])));
        }
        Ok(())
    }

    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

/// Gradient buffers aligned with a [`ParameterStore`], one per worker.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(Vec<Tensor>);

impl ParamGrads {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Self(store.values.iter().map(|v| Tensor::zeros(v.shape())).collect())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            a.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.0.iter()
    }
}
