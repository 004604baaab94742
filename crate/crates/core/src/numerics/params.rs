use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// Ordered, named collection of trainable tensors. Order is insertion order
/// and is part of the checkpoint contract.
#[derive(Debug, Clone)]
pub struct ParamSet<F: Scalar> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<F>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let t = Tensor::param(shape, data)?;
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        let idx = self.index[name];
        &self.entries[idx].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        let idx = self.index[name];
        &mut self.entries[idx].1
    }

    pub fn position(&self, name: &str) -> usize {
        self.index[name]
    }

    pub fn at(&self, idx: usize) -> (&str, &Tensor<F>) {
        let (n, t) = &self.entries[idx];
        (n, t)
    }

    pub fn at_mut(&mut self, idx: usize) -> (&str, &mut Tensor<F>) {
        let (n, t) = &mut self.entries[idx];
        (n, t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    pub fn total_numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}
