//! Named parameter storage and the execution context that binds stored
//! parameters into a [`Graph`].

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
    DenseWeight,
    DenseBias,
}

impl ParamRole {
    /// Running statistics are state, not trainable parameters.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    /// Normalization scale and shift are exempt from weight decay.
    pub fn decays(self) -> bool {
        self.is_trainable() && !matches!(self, ParamRole::NormScale | ParamRole::NormShift)
    }
}

/// Learning-rate group: the encoder and everything else train at different rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arc<Tensor>,
    pub role: ParamRole,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, role: ParamRole, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value: Arc::new(value),
            role,
            group,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(e.name.clone(), format!("{:?}", e.value.shape()), value.shape()));
        }
        e.value = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    /// Number of scalar values across trainable parameters.
    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.role.is_trainable())
            .map(|e| e.value.len())
            .sum()
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), (*e.value).clone()))
            .collect()
    }

    /// Replaces every stored tensor from `named`. The inventories must match
    /// exactly; every discrepancy is reported by name.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut problems = Vec::new();
        for e in &self.entries {
            match named.get(&e.name) {
                None => problems.push(format!("missing `{}`", e.name)),
                Some(t) if t.shape() != e.value.shape() => problems.push(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )),
                Some(_) => {}
            }
        }
        for name in named.keys() {
            if !self.by_name.contains_key(name) {
                problems.push(format!("unexpected `{name}`"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Inventory(problems.join("; ")));
        }
        for e in &mut self.entries {
            e.value = Arc::new(named[&e.name].clone());
        }
        Ok(())
    }
}

/// Deterministic per-parameter initializer: each tensor draws from its own
/// stream keyed by (seed, name), so adding or removing other parameters never
/// changes its initial value.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        // FNV-1a over the name, folded into the seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(h ^ self.seed.rotate_left(17))
    }

    /// Normal with std `sqrt(2 / fan_in)`.
    pub fn fan_in_normal(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let mut rng = self.rng(name);
        Tensor::from_fn(shape.to_vec(), |_| dist.sample(&mut rng))
    }

    /// Uniform on `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = self.rng(name);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

/// One forward evaluation: the tape, the parameters it reads, and whether
/// normalization uses batch or running statistics.
pub struct Ctx<'s> {
    graph: Graph,
    store: &'s mut ParamStore,
    mode: Mode,
    leaves: BTreeMap<ParamId, Var>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s mut ParamStore, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            leaves: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    /// Binds a stored parameter as a graph leaf. Repeated calls return the
    /// same leaf, so a parameter reused in several places accumulates one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let value = Arc::clone(&self.store.entries[id.0].value);
        let v = match self.mode {
            Mode::Train => self.graph.leaf(value),
            Mode::Infer => self.graph.constant(value),
        };
        self.leaves.insert(id, v);
        v
    }

    /// Stored values read as leaves so far (running statistics included).
    pub fn touched(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.leaves.keys().copied()
    }

    pub(crate) fn mark_touched(&mut self, id: ParamId) {
        if !self.leaves.contains_key(&id) {
            let value = Arc::clone(&self.store.entries[id.0].value);
            let v = self.graph.constant(value);
            self.leaves.insert(id, v);
        }
    }

    pub fn touched_names(&self) -> Vec<String> {
        self.touched().map(|id| self.store.entry(id).name.clone()).collect()
    }

    /// Gradients of trainable parameters that took part in the pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.leaves
            .iter()
            .filter(|(id, _)| self.store.entry(**id).role.is_trainable())
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect()
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }
}
