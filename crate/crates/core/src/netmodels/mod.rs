//! Learnable components: the encoder `f`, the scalar networks `α` and `α̃`,
//! the offset `c`, and the dissimilarity `δ = d̂ + α + α̃ + c`.

pub mod checkpoint;
mod dissim;
mod layers;
mod model;

pub use dissim::{dhat, dhat_pairwise, dissimilarity, AlphaMode, Dhat, DissimilaritySpec};
pub use layers::{AlphaNet, BatchNorm, Encoder, Linear, OutputHead};
pub use model::{Embeddings, Model, ModelConfig};

use thiserror::Error;

use crate::diffmath::{BatchStats, DiffError, Gradients, Graph, Rng, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Diff(#[from] DiffError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Optimizer group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    /// Encoder weights, the bounded-head scale and the offset `c`.
    Encoder,
    /// Weights of `α` and `α̃`.
    Alpha,
    /// Non-learned state (batch-norm running statistics).
    Buffer,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Alpha => "alpha",
            Group::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "encoder" => Some(Group::Encoder),
            "alpha" => Some(Group::Alpha),
            "buffer" => Some(Group::Buffer),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// Flat, ordered collection of named tensors; indices are stable handles.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> usize {
        self.params.push(Param { name: name.into(), group, value });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Number of scalar entries in learned (non-buffer) parameters.
    pub fn learned_size(&self) -> usize {
        self.params.iter().filter(|p| p.group != Group::Buffer).map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}

/// He-uniform initialization for a `[fan_in, fan_out]` weight.
pub(crate) fn kaiming_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize, slope: f64) -> Tensor {
    let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive dimensions")
}

/// Forward mode of a session.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass over a set of parameters. In training mode learned
/// parameters enter the graph as tracked leaves and batch-norm layers
/// record their batch statistics.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    mode: Mode,
    bn_stats: Vec<(BatchNorm, BatchStats)>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self { graph: Graph::new(), store, vars: vec![None; store.len()], mode, bn_stats: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Graph node for a stored parameter (created on first use).
    pub fn param(&mut self, idx: usize) -> Var {
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let p = self.store.get(idx);
        let v = if self.mode == Mode::Train && p.group != Group::Buffer {
            self.graph.param(p.value.clone())
        } else {
            self.graph.constant(p.value.clone())
        };
        self.vars[idx] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub(crate) fn record_bn(&mut self, bn: BatchNorm, stats: BatchStats) {
        self.bn_stats.push((bn, stats));
    }

    /// Batch statistics recorded during a training-mode pass.
    pub fn batch_stats(&self) -> &[(BatchNorm, BatchStats)] {
        &self.bn_stats
    }

    /// Reverse pass; gradients are indexed like the store.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>, DiffError> {
        let mut grads: Gradients = self.graph.backward(loss)?;
        Ok(self.vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect())
    }
}

/// Folds recorded batch statistics into running estimates:
/// `running ← momentum · running + (1 − momentum) · batch`.
pub fn update_running_stats(store: &mut ParamStore, stats: &[(BatchNorm, BatchStats)], momentum: f64) {
    for (bn, s) in stats {
        for (idx, fresh) in [(bn.running_mean, &s.mean), (bn.running_var, &s.var)] {
            let buf = store.get_mut(idx).value.data_mut();
            for (r, v) in buf.iter_mut().zip(fresh) {
                *r = momentum * *r + (1.0 - momentum) * v;
            }
        }
    }
}
