//! Named parameter storage and per-session graph binding.
//!
//! A [`ParamStore`] owns model parameters by name. Each forward/backward
//! session builds a [`Graph`], which registers every parameter as a tape leaf
//! and resolves names to node ids. Stores are plain values: cloning one forks
//! the model, so concurrent sessions never share mutable state.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{GradMap, Id, Tape, Tensor};

#[derive(Debug, Clone)]
struct Entry {
    tensor: Tensor,
    trainable: bool,
}

/// Ordered map of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.entries
            .insert(name.to_string(), Entry { tensor, trainable: true });
    }

    /// Inserts a derived constant that must not receive gradient updates
    /// (cached biases and the like).
    pub fn insert_frozen(&mut self, name: &str, tensor: Tensor) {
        self.entries
            .insert(name.to_string(), Entry { tensor, trainable: false });
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name).map(|e| e.tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count across all entries.
    pub fn total_numel(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }
}

/// One computation session: a tape with every store parameter bound as a leaf.
pub struct Graph {
    pub tape: Tape,
    ids: BTreeMap<String, Id>,
    /// Diagnostics collected during forward passes (saturation stats etc.).
    pub diag: Vec<(String, f64)>,
}

impl Graph {
    /// Binds all parameters. With `trainable` set, trainable entries become
    /// grad-enabled leaves; frozen entries are always constants.
    pub fn from_store(store: &ParamStore, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let mut ids = BTreeMap::new();
        for (name, entry) in &store.entries {
            let t = if trainable && entry.trainable {
                entry.tensor.clone().with_grad()
            } else {
                entry.tensor.clone()
            };
            ids.insert(name.clone(), tape.leaf(t));
        }
        Self { tape, ids, diag: Vec::new() }
    }

    /// Evaluation-only graph with no parameters bound.
    pub fn empty() -> Self {
        Self { tape: Tape::new(), ids: BTreeMap::new(), diag: Vec::new() }
    }

    pub fn p(&self, name: &str) -> Result<Id> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unbound parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }

    pub fn input(&mut self, t: Tensor) -> Id {
        self.tape.leaf(t)
    }

    pub fn constant(&mut self, t: Tensor) -> Id {
        self.tape.constant(t)
    }

    /// Runs the backward pass and returns gradients keyed by parameter name.
    pub fn backward_named(self, loss: Id) -> Result<BTreeMap<String, Tensor>> {
        let ids = self.ids;
        let grads: GradMap = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, id) in ids {
            if let Some(g) = grads.get(id) {
                out.insert(name, g.clone());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip_and_counts() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::zeros(&[2, 3]));
        s.insert_frozen("a.cache", Tensor::zeros(&[4]));
        assert_eq!(s.total_numel(), 10);
        assert!(s.is_trainable("a.w"));
        assert!(!s.is_trainable("a.cache"));
    }

    #[test]
    fn graph_binds_and_backprops_by_name() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![2.0, 3.0]));
        let mut g = Graph::from_store(&s, true);
        let w = g.p("w").unwrap();
        let sq = g.tape.mul(w, w).unwrap();
        let loss = g.tape.sum_all(sq).unwrap();
        let grads = g.backward_named(loss).unwrap();
        assert_eq!(grads["w"].data(), &[4.0, 6.0]);
    }

    #[test]
    fn frozen_entries_get_no_gradient() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![2.0]));
        s.insert_frozen("c", Tensor::from_vec(vec![5.0]));
        let mut g = Graph::from_store(&s, true);
        let w = g.p("w").unwrap();
        let c = g.p("c").unwrap();
        let y = g.tape.mul(w, c).unwrap();
        let loss = g.tape.sum_all(y).unwrap();
        let grads = g.backward_named(loss).unwrap();
        assert!(grads.contains_key("w"));
        assert!(!grads.contains_key("c"));
    }
}
