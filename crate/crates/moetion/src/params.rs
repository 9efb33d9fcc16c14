//! Named parameter storage shared by models, adapters, and tokenizers.
//!
//! Parameters live outside the per-pass tape; a forward pass copies values in
//! as leaves and training applies optimizer updates back here.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

struct Slot {
    name: String,
    value: Tensor,
    trainable: bool,
}

#[derive(Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {}",
            name
        );
        let id = ParamId(self.slots.len());
        self.by_name.insert(name.to_string(), id.0);
        self.slots.push(Slot {
            name: name.to_string(),
            value,
            trainable,
        });
        id
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.slots[id.0].value.shape(),
            value.shape(),
            "set_value shape mismatch for {}",
            self.slots[id.0].name
        );
        self.slots[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.slots[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.slots[id.0].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    /// Ids sorted by parameter name (stable across runs).
    pub fn ids_by_name(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.by_name.values().map(|&i| ParamId(i))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn num_values(&self, trainable_only: bool) -> usize {
        self.slots
            .iter()
            .filter(|s| !trainable_only || s.trainable)
            .map(|s| s.value.numel())
            .sum()
    }

    /// SHA-256 over the named subset of parameters, in name order. Used to
    /// verify that frozen weights survive tuning untouched.
    pub fn content_hash(&self, filter: impl Fn(&str) -> bool) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, &i) in &self.by_name {
            if !filter(name) {
                continue;
            }
            h.update(name.as_bytes());
            for &v in self.slots[i].value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_lookup() {
        let mut s = ParamStore::new();
        let id = s.add("layer/w", Tensor::zeros(vec![2, 2]), true);
        assert_eq!(s.lookup("layer/w"), Some(id));
        assert_eq!(s.name(id), "layer/w");
        assert!(s.is_trainable(id));
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(vec![1]), true);
        s.add("w", Tensor::zeros(vec![1]), true);
    }

    #[test]
    fn hash_changes_with_values() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(vec![2]), true);
        let h0 = s.content_hash(|_| true);
        s.set_value(id, Tensor::from_vec(vec![2], vec![1.0, 0.0]));
        let h1 = s.content_hash(|_| true);
        assert_ne!(h0, h1);
    }
}
