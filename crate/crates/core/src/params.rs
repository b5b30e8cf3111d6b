//! Named parameter storage and matching gradient buffers.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type ParamId = usize;

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    #[serde(skip)]
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    /// Xavier-uniform `rows × cols` matrix.
    pub fn add_xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::matrix(rows, cols, data).expect("non-empty"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, len: usize, value: f64) -> ParamId {
        self.add(name, Tensor::full(&[len], value))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Rebuilds the name index after deserialisation.
    pub fn reindex(&mut self) -> Result<()> {
        if self.names.len() != self.tensors.len() {
            return Err(Error::Schema("parameter names and tensors differ in count".into()));
        }
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(())
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config("parameter sets differ".into()));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Config("parameter shapes differ".into()));
            }
        }
        Ok(())
    }
}

/// Gradient buffers, one per parameter. Accumulates until [`GradStore::zero`].
#[derive(Clone, Debug)]
pub struct GradStore {
    grads: Vec<Tensor>,
}

impl GradStore {
    pub fn for_params(params: &ParamStore) -> Self {
        GradStore {
            grads: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn empty() -> Self {
        GradStore { grads: Vec::new() }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id]
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        self.grads[id].add_assign(grad);
    }

    pub fn add_store(&mut self, other: &GradStore) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.scale_assign(s);
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    /// Index of the first parameter whose gradient is not finite.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.grads.iter().position(|g| !g.all_finite())
    }
}
