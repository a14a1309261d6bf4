use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Named, ordered collection of model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(move |(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        Binding { vars }
    }
}

/// Tape handles of a [`ParamStore`] bound for one forward pass.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps handles that are already on a tape, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient buffers in parameter order; parameters without a gradient get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(v).numel()],
            })
            .collect()
    }
}
