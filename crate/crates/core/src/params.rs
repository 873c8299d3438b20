//! Named learnable tensors with matching gradient accumulators.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every tensor is two-dimensional; biases and layer-norm gains are `1 × n`.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
    index: BTreeMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateId(name));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Matrix::zeros(value.raw_dim()));
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    /// Normal(0, std) initialisation drawn from `rng`.
    pub fn insert_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let value = Matrix::from_shape_simple_fn((rows, cols), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        self.insert(name, value)
    }

    pub fn insert_constant(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fill: f64,
    ) -> Result<ParamId> {
        self.insert(name, Matrix::from_elem((rows, cols), fill))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids in lexicographic name order, the order used for serialisation.
    pub fn sorted_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.index.values().copied()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &crate::autodiff::Gradients) {
        for (id, g) in grads.params() {
            self.grads[id.0] += g;
        }
    }

    /// Split borrow used by optimisers: values mutable, gradients shared.
    pub fn values_and_grads_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Matrix, &Matrix)> {
        self.values
            .iter_mut()
            .zip(self.grads.iter())
            .enumerate()
            .map(|(i, (v, g))| (ParamId(i), v, g))
    }
}
