//! Named learnable tensors and the outer-loop optimizers.
//!
//! All of a model's learnable tensors live in a [`ParamStore`] keyed by
//! stable names in sorted order, which fixes the iteration order for
//! gradient accumulation, norm computation, and checkpoint layout.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        let prev = self.tensors.insert(name.clone(), t);
        assert!(prev.is_none(), "parameter '{name}' registered twice");
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
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

    /// Name/tensor pairs in sorted name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn total_len(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Leaf node ids for every tensor of a [`ParamStore`] in one graph.
#[derive(Debug)]
pub struct BoundParams {
    map: BTreeMap<String, crate::autodiff::NodeId>,
}

impl BoundParams {
    /// Inserts every parameter as a leaf (tensors are shared, not copied).
    pub fn bind_all(g: &mut crate::autodiff::Graph, store: &ParamStore) -> BoundParams {
        let map = store
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone())))
            .collect();
        BoundParams { map }
    }

    pub fn get(&self, name: &str) -> Result<crate::autodiff::NodeId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// (name, node) pairs in sorted name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &crate::autodiff::NodeId)> {
        self.map.iter()
    }
}

// ── Initializers ────────────────────────────────────────────────────

/// Truncated normal (clipped at two standard deviations).
pub fn init_trunc_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.trunc_normal(std))
}

/// Plain normal.
pub fn init_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() * std)
}

/// Glorot (fan-average) uniform for rank-2 kernels.
pub fn init_glorot(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.range(-limit, limit))
}

// ── Outer optimizers ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOpt {
    Adam,
    Sgd,
}

/// Per-parameter Adam slots. Step counts are tracked per parameter so tensors
/// added later (cluster expansion) start their own bias correction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: BTreeMap<String, u64>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One optimizer step over every (param, gradient) pair, in name order.
pub fn apply_update(
    opt: OuterOpt,
    lr: f64,
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    adam: &mut AdamState,
) -> Result<()> {
    for (name, grad) in grads {
        let param = params.get_mut(name)?;
        match opt {
            OuterOpt::Sgd => {
                let p = param.data_mut();
                for (pv, gv) in p.iter_mut().zip(grad.data()) {
                    *pv -= lr * gv;
                }
            }
            OuterOpt::Adam => {
                let n = param.numel();
                let m = adam
                    .m
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(param.shape()));
                let mslice = m.data_mut();
                let v = adam
                    .v
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(grad.shape()));
                let vslice = v.data_mut();
                let t = adam.t.entry(name.clone()).or_insert(0);
                *t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                let p = param.data_mut();
                for i in 0..n {
                    let g = grad.data()[i];
                    mslice[i] = ADAM_BETA1 * mslice[i] + (1.0 - ADAM_BETA1) * g;
                    vslice[i] = ADAM_BETA2 * vslice[i] + (1.0 - ADAM_BETA2) * g * g;
                    let mhat = mslice[i] / bc1;
                    let vhat = vslice[i] / bc2;
                    p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(())
}

/// Global L2 norm over gradients in name order.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    let mut acc = 0.0;
    for g in grads.values() {
        for v in g.data() {
            acc += v * v;
        }
    }
    acc.sqrt()
}

/// Scales all gradients so the global norm does not exceed `clip`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, clip: f64) {
    let norm = global_norm(grads);
    if norm > clip {
        let s = clip / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}
