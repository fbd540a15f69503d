//! Named parameter tensors tagged with the group that decides whether a
//! training phase may touch them.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParameterGroup {
    Encoder,
    DecoderBase,
    LmHead,
    Adapter,
}

impl ParameterGroup {
    pub const ALL: [ParameterGroup; 4] = [
        ParameterGroup::Encoder,
        ParameterGroup::DecoderBase,
        ParameterGroup::LmHead,
        ParameterGroup::Adapter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParameterGroup::Encoder => "encoder",
            ParameterGroup::DecoderBase => "decoder-base",
            ParameterGroup::LmHead => "lm-head",
            ParameterGroup::Adapter => "adapter",
        }
    }
}

impl fmt::Display for ParameterGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParameterGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParameterGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub group: ParameterGroup,
    pub tensor: Tensor,
}

/// Insertion-ordered parameter collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<NamedTensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParameterGroup, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(NamedTensor { name, group, tensor });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut NamedTensor {
        &mut self.entries[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        &self.entries[i].tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        &mut self.entries[i].tensor
    }

    pub fn groups(&self) -> BTreeSet<ParameterGroup> {
        self.entries.iter().map(|e| e.group).collect()
    }

    pub fn group_entries(&self, group: ParameterGroup) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter().filter(move |e| e.group == group)
    }

    pub fn has_group(&self, group: ParameterGroup) -> bool {
        self.entries.iter().any(|e| e.group == group)
    }

    /// Drops every tensor of `group`, keeping the order of the rest.
    pub fn remove_group(&mut self, group: ParameterGroup) -> Vec<NamedTensor> {
        let (removed, kept): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.entries).into_iter().partition(|e| e.group == group);
        self.entries = kept;
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        removed
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Round every value through `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            for v in e.tensor.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// True when every tensor outside `groups` is bitwise equal in `other`.
    pub fn frozen_equal(&self, other: &ParamStore, groups: &BTreeSet<ParameterGroup>) -> bool {
        let mine = self.entries.iter().filter(|e| !groups.contains(&e.group));
        let theirs = other.entries.iter().filter(|e| !groups.contains(&e.group));
        let (mine, theirs): (Vec<_>, Vec<_>) = (mine.collect(), theirs.collect());
        mine.len() == theirs.len()
            && mine.iter().zip(&theirs).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Per-group statistics: tensor count, scalar count, fraction of all scalars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub tensors: usize,
    pub scalars: usize,
    pub fraction: f64,
}

pub fn param_stats(store: &ParamStore) -> Vec<(ParameterGroup, GroupStats)> {
    let total = store.scalar_count().max(1) as f64;
    ParameterGroup::ALL
        .into_iter()
        .map(|g| {
            let (tensors, scalars) = store
                .group_entries(g)
                .fold((0, 0), |(t, s), e| (t + 1, s + e.tensor.len()));
            (
                g,
                GroupStats {
                    tensors,
                    scalars,
                    fraction: scalars as f64 / total,
                },
            )
        })
        .collect()
}

/// Puts parameters on a tape on first use and remembers the leaf.
pub struct Binder<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    trainable: &'a dyn Fn(ParameterGroup) -> bool,
    bound: HashMap<usize, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a dyn Fn(ParameterGroup) -> bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            trainable,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn p(&mut self, name: &str) -> Var {
        let i = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        if let Some(v) = self.bound.get(&i) {
            return *v;
        }
        let e = &self.store.entries()[i];
        let v = self
            .tape
            .param(i, e.tensor.clone(), (self.trainable)(e.group));
        self.bound.insert(i, v);
        v
    }
}

pub fn frozen(_: ParameterGroup) -> bool {
    false
}

pub fn all_trainable(_: ParameterGroup) -> bool {
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_names_round_trip() {
        for g in ParameterGroup::ALL {
            assert_eq!(g.as_str().parse::<ParameterGroup>().unwrap(), g);
        }
        assert!("decoder".parse::<ParameterGroup>().is_err());
    }

    #[test]
    fn remove_group_reindexes() {
        let mut s = ParamStore::new();
        s.insert("a", ParameterGroup::Encoder, Tensor::zeros(&[2]));
        s.insert("x", ParameterGroup::Adapter, Tensor::zeros(&[3]));
        s.insert("b", ParameterGroup::LmHead, Tensor::zeros(&[4]));
        let removed = s.remove_group(ParameterGroup::Adapter);
        assert_eq!(removed.len(), 1);
        assert_eq!(s.index_of("b"), Some(1));
        assert_eq!(s.scalar_count(), 6);
    }

    #[test]
    fn stats_fractions_sum_to_one() {
        let mut s = ParamStore::new();
        s.insert("a", ParameterGroup::Encoder, Tensor::zeros(&[7]));
        s.insert("b", ParameterGroup::DecoderBase, Tensor::zeros(&[3]));
        s.insert("c", ParameterGroup::LmHead, Tensor::zeros(&[11]));
        let total: f64 = param_stats(&s).iter().map(|(_, g)| g.fraction).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
