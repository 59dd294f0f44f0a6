//! Flat parameter storage shared by all layers of a network.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; the store keeps tensors in
//! declaration order, which is also the checkpoint order and the order the
//! optimizer walks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, BnMode, Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Weight decay applies to convolution and linear weights only.
    pub fn decayed(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }

    pub fn code(self) -> u8 {
        match self {
            ParamKind::ConvWeight => 0,
            ParamKind::LinearWeight => 1,
            ParamKind::Bias => 2,
            ParamKind::BnScale => 3,
            ParamKind::BnShift => 4,
            ParamKind::RunningMean => 5,
            ParamKind::RunningVar => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ParamKind::ConvWeight,
            1 => ParamKind::LinearWeight,
            2 => ParamKind::Bias,
            3 => ParamKind::BnScale,
            4 => ParamKind::BnShift,
            5 => ParamKind::RunningMean,
            6 => ParamKind::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Real> {
    entries: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.entries.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// SHA-256 over names, kinds and serialized values: any bit change in
    /// any parameter or running statistic changes the digest.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.entries {
            h.update(p.name.as_bytes());
            h.update([p.kind.code()]);
            h.update(p.value.to_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Records every trainable entry on `graph` as a differentiable leaf, or
    /// as a constant when `frozen`. Running statistics are not recorded.
    pub fn bind(&self, graph: &mut Graph<T>, frozen: bool) -> Bound {
        let nodes = self
            .entries
            .iter()
            .map(|p| {
                p.kind.trainable().then(|| {
                    if frozen {
                        graph.constant(p.value.clone())
                    } else {
                        graph.leaf(p.value.clone())
                    }
                })
            })
            .collect();
        Bound { nodes }
    }

    /// Writes batch-norm running statistics collected during a train-mode pass.
    pub fn apply_stats(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, value) in updates {
            debug_assert!(!self.entries[id.0].kind.trainable());
            self.entries[id.0].value = value;
        }
    }

    /// Replaces all values with those of `other`, which must have an
    /// identical layout.
    pub fn load_from(&mut self, other: ParamStore<T>) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Spec(format!(
                "parameter count {} != expected {}",
                other.entries.len(),
                self.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter().zip(&other.entries) {
            if mine.name != theirs.name || mine.kind != theirs.kind || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Spec(format!(
                    "parameter `{}` {:?}{} does not match `{}` {:?}{}",
                    theirs.name,
                    theirs.kind,
                    theirs.value.shape(),
                    mine.name,
                    mine.kind,
                    mine.value.shape()
                )));
            }
        }
        self.entries = other.entries;
        Ok(())
    }
}

/// Graph nodes of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    nodes: Vec<Option<NodeId>>,
}

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0].expect("running statistics are not bound")
    }

    pub fn get(&self, id: ParamId) -> Option<NodeId> {
        self.nodes.get(id.0).copied().flatten()
    }

    /// Takes the gradient of every bound entry off the graph, in store
    /// order. Entries the loss does not depend on get zeros.
    pub fn grads<T: Real>(&self, graph: &mut Graph<T>, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        self.nodes
            .iter()
            .zip(&store.entries)
            .map(|(node, p)| {
                node.map(|n| graph.take_grad(n).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            })
            .collect()
    }
}

/// Forward-pass context for one network on one graph.
pub struct Ctx<'a, T: Real> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a ParamStore<T>,
    pub bound: &'a Bound,
    pub mode: BnMode,
    stats: Vec<(ParamId, Tensor<T>)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a ParamStore<T>, bound: &'a Bound, mode: BnMode) -> Self {
        Ctx {
            graph,
            params,
            bound,
            mode,
            stats: Vec::new(),
        }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.bound.node(id)
    }

    /// Batch norm against the running statistics in `mean`/`var`; train-mode
    /// updates are queued and returned by [`Ctx::finish`].
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        mean: ParamId,
        var: ParamId,
    ) -> Result<NodeId> {
        let mut m = self.params.value(mean).clone();
        let mut v = self.params.value(var).clone();
        let out = self.graph.batchnorm3d(
            x,
            self.bound.node(gamma),
            self.bound.node(beta),
            BatchNormState {
                mean: m.data_mut(),
                var: v.data_mut(),
            },
            self.mode,
        )?;
        if self.mode == BnMode::Train {
            self.stats.push((mean, m));
            self.stats.push((var, v));
        }
        Ok(out)
    }

    /// Running-statistics updates to apply with [`ParamStore::apply_stats`].
    pub fn finish(self) -> Vec<(ParamId, Tensor<T>)> {
        self.stats
    }
}

/// Parameter allocation during network construction.
pub struct Init<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    /// Zero-mean normal with variance `2 / fan_in`.
    pub fn he(&mut self, name: &str, kind: ParamKind, shape: Shape, fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let value = Tensor::randn(shape, std, self.rng);
        self.store.add(name, kind, value)
    }

    pub fn constant(&mut self, name: &str, kind: ParamKind, shape: Shape, v: f64) -> ParamId {
        self.store.add(name, kind, Tensor::full(shape, T::lit(v)))
    }

    pub fn uniform(&mut self, name: &str, kind: ParamKind, shape: Shape, bound: f64) -> ParamId {
        let value = Tensor::rand_uniform(shape, -bound, bound, self.rng);
        self.store.add(name, kind, value)
    }

    pub fn seed_child(&mut self) -> u64 {
        self.rng.random()
    }
}
