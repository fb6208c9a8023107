use std::collections::BTreeMap;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named learnable tensors, ordered by hierarchical name
/// (e.g. `encoder.transformer.0.attention.query.weight`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    /// Removes every tensor whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    /// Copies in every tensor from `other`, overwriting same-named entries.
    pub fn extend_from(&mut self, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.insert(k, v.clone());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Places every tensor on `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), graph.param(v.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Places every tensor on `graph` as a constant (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), graph.constant(v.clone())))
            .collect();
        BoundParams { vars }
    }
}

/// Name → graph variable mapping for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binding over already-placed variables, e.g. the leaves handed out by
    /// [`grad_check`](super::grad_check).
    pub fn from_vars<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, Var)>,
        S: Into<String>,
    {
        Self {
            vars: pairs.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Gradients for every bound parameter accepted by `keep`; parameters
    /// that received no gradient get zeros.
    pub fn collect_grads(
        &self,
        graph: &Graph,
        grads: &Gradients,
        keep: impl Fn(&str) -> bool,
    ) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &var) in &self.vars {
            if keep(name) {
                out.insert(name.clone(), grads.get_or_zeros(var, graph.value(var).shape()));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remove_prefix_drops_subtree_only() {
        let mut p = ParamStore::new();
        p.insert("encoder.head.proj.weight", Tensor::zeros(&[2, 2]));
        p.insert("encoder.head.proj.bias", Tensor::zeros(&[2]));
        p.insert("encoder.final_norm.gamma", Tensor::zeros(&[2]));
        p.remove_prefix("encoder.head.");
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["encoder.final_norm.gamma"]);
    }
}
