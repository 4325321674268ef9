use std::collections::BTreeMap;

use crate::autograd::{Gradients, Mat, Tape, Var};

/// Named parameter tensors. Iteration order is the sorted name order, which
/// keeps optimizer updates and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars in tensors whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, m)| m.len())
            .sum()
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(n, m)| (n.clone(), tape.param(m.clone())))
                .collect(),
        }
    }

    /// Registers every tensor as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(n, m)| (n.clone(), tape.constant(m.clone())))
                .collect(),
        }
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Panics on unknown names; parameter layouts are fixed at construction.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Gradient per parameter name, zero-filled where nothing flowed.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Mat> {
        self.vars
            .iter()
            .map(|(n, &v)| (n.clone(), grads.get_or_zeros(v, tape.shape(v))))
            .collect()
    }
}
