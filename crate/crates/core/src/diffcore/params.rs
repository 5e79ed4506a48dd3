use std::collections::BTreeMap;

use crate::diffcore::graph::Graph;
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Named parameter collection with per-parameter freeze flags. Iteration
/// order is the lexicographic order of names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(
            name.into(),
            Param {
                tensor,
                frozen: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Sets the freeze flag on every parameter whose name starts with `prefix`;
    /// returns how many matched.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn unfreeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.frozen = false);
    }

    /// Zeroes gradient buffers of trainable parameters and drops those of
    /// frozen ones.
    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            if p.frozen {
                p.tensor.clear_grad();
            } else {
                p.tensor.zero_grad();
            }
        }
    }

    /// Adds the leaf gradients of every parameter bound into `graph`.
    pub fn accumulate_grads(&mut self, graph: &Graph) -> Result<()> {
        for (name, var) in graph.bindings() {
            if let Some(g) = graph.grad(var) {
                let p = self
                    .params
                    .get_mut(name)
                    .ok_or_else(|| Error::Contract(format!("graph bound unknown parameter '{name}'")))?;
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Copies the values (not the freeze flags) of all parameters under
    /// `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) {
        for (name, p) in other.iter() {
            if name.starts_with(prefix) {
                let mut t = p.tensor.clone();
                t.clear_grad();
                self.insert(name, t);
            }
        }
    }
}
