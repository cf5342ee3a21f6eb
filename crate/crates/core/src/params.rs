//! Named trees of tensors: model weights, optimizer slots, gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::Tensor;

/// Ordered name -> tensor map. Iteration order is the lexicographic name
/// order, which every consumer (optimizer, checkpoint, gradient reduction)
/// relies on for determinism.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree {
    entries: BTreeMap<String, Tensor>,
}

impl ParamTree {
    pub fn new() -> ParamTree {
        ParamTree::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar coordinate count.
    pub fn num_coords(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// True when both trees hold bit-identical tensors under the same names.
    pub fn bitwise_eq(&self, other: &ParamTree) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }

    /// Installs every tensor as a leaf on `tape`.
    pub fn load_onto(&self, tape: &mut Tape, track: bool) -> ParamNodes {
        let mut nodes = BTreeMap::new();
        for (name, tensor) in &self.entries {
            nodes.insert(name.clone(), tape.leaf(tensor.clone(), track));
        }
        ParamNodes { nodes }
    }
}

/// Tape handles for a loaded [`ParamTree`].
pub struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter node `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.nodes.iter()
    }

    /// Resolves tape gradients back to parameter names. Tracked leaves the
    /// loss never reached come back as zeros from [`Tape::backward`].
    pub fn grads_by_name(&self, grads: &Gradients) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, node) in &self.nodes {
            let g = grads.get(*node).ok_or_else(|| {
                Error::InvalidArgument(format!("no gradient recorded for `{name}`"))
            })?;
            out.insert(name.clone(), g.clone());
        }
        Ok(out)
    }
}
