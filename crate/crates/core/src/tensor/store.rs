//! Named parameter store.
//!
//! Entries live in a `BTreeMap` so every iteration (optimizer updates,
//! checksums, checkpoint layout) is deterministic. Parameter buffers sit
//! behind `Arc`s; forward passes bind them as leaf tensors without copying,
//! and the optimizer mutates them in place once the step's tapes are dropped.

use std::collections::BTreeMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{Scalar, Tensor};

#[derive(Clone)]
pub struct ParamEntry<S: Scalar> {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<S>>,
    pub trainable: bool,
}

/// Map from dotted parameter names to tensors, split into trainable and
/// frozen sets. Frozen entries never receive optimizer updates.
#[derive(Clone, Default)]
pub struct ParamStore<S: Scalar> {
    entries: BTreeMap<String, ParamEntry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<S>, trainable: bool) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter {name}"
        );
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                shape,
                data: Arc::new(data),
                trainable,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> &ParamEntry<S> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<S>> {
        self.entries.get(name)
    }

    /// Bind a parameter as a leaf tensor. `track_grads` is normally the
    /// entry's trainable flag; evaluation passes false to skip the tape.
    pub fn leaf(&self, name: &str, track_grads: bool) -> Tensor<S> {
        let e = self.entry(name);
        Tensor::leaf_shared(e.shape.clone(), Arc::clone(&e.data), track_grads)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<S>)> {
        self.entries.iter()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .trainable = trainable;
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.trainable = false;
            }
        }
    }

    /// In-place update of one parameter buffer. Clones only if a stale tape
    /// still holds the buffer.
    pub fn update(&mut self, name: &str, f: impl FnOnce(&mut [S])) {
        let e = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let data: &mut Vec<S> = Arc::make_mut(&mut e.data);
        f(data.as_mut_slice());
    }

    pub fn param_count(&self, trainable: bool) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable == trainable)
            .map(|e| e.data.len())
            .sum()
    }

    pub fn count_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, e)| e.data.len())
            .sum()
    }

    /// SHA-256 over the little-endian bytes of one entry.
    pub fn checksum(&self, name: &str) -> [u8; 32] {
        let e = self.entry(name);
        let mut bytes = Vec::with_capacity(e.data.len() * S::byte_width());
        for v in e.data.iter() {
            v.write_le(&mut bytes);
        }
        let mut h = Sha256::new();
        h.update(&bytes);
        h.finalize().into()
    }

    /// Checksum over all frozen entries, in name order.
    pub fn frozen_checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            if !e.trainable {
                h.update(name.as_bytes());
                let mut bytes = Vec::with_capacity(e.data.len() * S::byte_width());
                for v in e.data.iter() {
                    v.write_le(&mut bytes);
                }
                h.update(&bytes);
            }
        }
        h.finalize().into()
    }
}
