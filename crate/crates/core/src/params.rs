//! Flat named-tensor parameter store and the naming scheme for model weights.

use std::collections::BTreeMap;

use crate::autograd::{FreezeMask, Graph, NodeId, Real, Tensor};
use crate::error::{Error, Result};

/// Parameters keyed by name, iterated in sorted order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F: Real = f32> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Option<Tensor<F>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<F>> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of stored reals.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Mask covering exactly this store's parameters.
    pub fn mask_where(&self, trainable: impl Fn(&str) -> bool) -> FreezeMask {
        FreezeMask::from_fn(self.names(), trainable)
    }

    /// Checks that `mask` has exactly one entry per stored parameter.
    pub fn check_mask(&self, mask: &FreezeMask) -> Result<()> {
        if mask.len() != self.len() {
            return Err(Error::MaskMismatch(format!(
                "{} mask entries for {} parameters",
                mask.len(),
                self.len()
            )));
        }
        for name in self.names() {
            if mask.get(name).is_none() {
                return Err(Error::MaskMismatch(format!("no entry for `{name}`")));
            }
        }
        Ok(())
    }

    /// Adds every parameter to `graph` as a leaf, trainable per `mask`.
    pub fn bind(&self, graph: &mut Graph<F>, mask: &FreezeMask) -> Result<Bindings> {
        self.check_mask(mask)?;
        let nodes = self
            .tensors
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    graph.param(name.clone(), t.clone(), mask.is_trainable(name)),
                )
            })
            .collect();
        Ok(Bindings(nodes))
    }
}

/// Graph node ids of bound parameters.
#[derive(Debug, Clone, Default)]
pub struct Bindings(BTreeMap<String, NodeId>);

impl Bindings {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn try_get(&self, name: &str) -> Option<NodeId> {
        self.0.get(name).copied()
    }
}

/// Parameter names. Temporal coefficients carry a perspective suffix; a plain
/// model is the single-perspective case with suffix `0`.
pub mod names {
    pub const EMBEDDING: &str = "emb.weight";
    pub const HEAD: &str = "head.weight";
    pub const SELECTOR_WEIGHT: &str = "selector.weight";
    pub const SELECTOR_BIAS: &str = "selector.bias";
    pub const MERGE_WEIGHT: &str = "merge.weight";
    pub const MERGE_BIAS: &str = "merge.bias";

    pub fn ln(prefix: &str) -> (String, String) {
        (format!("{prefix}.weight"), format!("{prefix}.bias"))
    }

    pub fn block(layer: usize, rest: &str) -> String {
        format!("blocks.{layer}.{rest}")
    }

    /// `mix` is one of `att.time_mix_r`, `att.time_mix_k`, `att.time_mix_v`,
    /// `ffn.time_mix_r`, `ffn.time_mix_k`.
    pub fn temporal(layer: usize, mix: &str, perspective: usize) -> String {
        format!("blocks.{layer}.{mix}.{perspective}")
    }

    pub const TEMPORAL_SLOTS: [&str; 5] = [
        "att.time_mix_r",
        "att.time_mix_k",
        "att.time_mix_v",
        "ffn.time_mix_r",
        "ffn.time_mix_k",
    ];

    pub fn is_temporal(name: &str) -> bool {
        name.contains(".time_mix_")
    }

    pub fn is_aggregator(name: &str) -> bool {
        name.starts_with("selector.") || name.starts_with("merge.")
    }

    /// Everything that is neither a temporal coefficient nor an aggregator.
    pub fn is_base(name: &str) -> bool {
        !is_temporal(name) && !is_aggregator(name)
    }
}
