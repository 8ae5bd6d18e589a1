//! Named parameter storage, grouping, and binding onto a [`Tape`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// The five independently optimized parameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Semantic,
    Variation,
    Decoder,
    DomainClassifier,
    LabelHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Semantic,
        ParamGroup::Variation,
        ParamGroup::Decoder,
        ParamGroup::DomainClassifier,
        ParamGroup::LabelHead,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Semantic => "semantic.",
            ParamGroup::Variation => "variation.",
            ParamGroup::Decoder => "decoder.",
            ParamGroup::DomainClassifier => "domain_cls.",
            ParamGroup::LabelHead => "label_head.",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        Self::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Little-endian bytes of every tensor in a group, in name order.
    pub fn group_bytes(&self, group: ParamGroup) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in &self.map {
            if ParamGroup::of(name) == Some(group) {
                out.extend_from_slice(name.as_bytes());
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        out
    }

    /// Copy every tensor belonging to `group` from `other`.
    pub fn copy_group_from(&mut self, other: &ParamStore, group: ParamGroup) {
        self.map.retain(|name, _| ParamGroup::of(name) != Some(group));
        for (name, t) in &other.map {
            if ParamGroup::of(name) == Some(group) {
                self.map.insert(name.clone(), t.clone());
            }
        }
    }
}

/// Truncated normal at ±2σ, resampled.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Lazily exposes [`ParamStore`] entries as tape leaves.
///
/// Only parameters in the trainable groups become gradient-carrying leaves;
/// everything else enters the tape as a constant.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Vec<ParamGroup>,
    vars: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: &[ParamGroup]) -> Self {
        Self {
            store,
            trainable: trainable.to_vec(),
            vars: BTreeMap::new(),
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, &[])
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.get(name).is_some()
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone();
        let train = ParamGroup::of(name).is_some_and(|g| self.trainable.contains(&g));
        let v = tape.leaf(t, train);
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Gradients for every trainable parameter in the store; parameters the
    /// forward pass never touched get zeros.
    pub fn collect_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, t) in self.store.iter() {
            let Some(g) = ParamGroup::of(name) else { continue };
            if !self.trainable.contains(&g) {
                continue;
            }
            let grad = self
                .vars
                .get(name)
                .and_then(|&v| grads.take(v))
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name.clone(), grad);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn groups_from_prefix() {
        assert_eq!(ParamGroup::of("semantic.cls"), Some(ParamGroup::Semantic));
        assert_eq!(ParamGroup::of("domain_cls.fc2.w"), Some(ParamGroup::DomainClassifier));
        assert_eq!(ParamGroup::of("other"), None);
    }

    #[test]
    fn trunc_normal_bounded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t = trunc_normal(&mut rng, &[1000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let std = (t.sum_squares() / 1000.0).sqrt();
        assert!(std > 0.01 && std < 0.02, "{std}");
    }
}
