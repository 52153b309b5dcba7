use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Named parameters in canonical (lexicographic key) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, t: Tensor) {
        self.map.insert(key.into(), t);
    }

    pub fn get(&self, key: &str) -> Result<&Tensor> {
        self.map
            .get(key)
            .ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    pub fn get_mut(&mut self, key: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(key)
            .ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<Tensor> {
        self.map.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.map.values_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter on `tape`; only keys in `trainable` track
    /// gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: &BTreeSet<String>) -> Bindings {
        let mut vars = BTreeMap::new();
        for (k, t) in &self.map {
            let v = if trainable.contains(k) {
                tape.leaf(&t.clone().with_requires_grad(true))
            } else {
                tape.constant(t.clone())
            };
            vars.insert(k.clone(), v);
        }
        Bindings { vars }
    }
}

/// Parameter key → tape variable for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, key: &str) -> Result<Var> {
        self.vars
            .get(key)
            .copied()
            .ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    pub fn get(&self, key: &str) -> Option<Var> {
        self.vars.get(key).copied()
    }

    /// Substitutes the variable for `key`; used to differentiate with
    /// respect to one parameter in isolation.
    pub fn set(&mut self, key: impl Into<String>, v: Var) {
        self.vars.insert(key.into(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
