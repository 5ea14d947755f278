//! The base learner: a small MLP over a flat parameter vector, its
//! regression loss, and the differentiable inner-loop adaptation.
//!
//! All base-learner parameters live in one flat vector packed layer-major,
//! weights before bias: [w1, b1, w2, b2, w3, b3]. For the default 1-40-40-1
//! architecture that is (1*40+40) + (40*40+40) + (40*1+1) = 1761 values.
//! Keeping the parameters flat is what lets a sigmoid gate of the same
//! length modulate the initialization elementwise.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Whether the regression loss averages or sums over examples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpArch {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
}

impl Default for MlpArch {
    fn default() -> Self {
        MlpArch {
            input: 1,
            hidden: vec![40, 40],
            output: 1,
            activation: Activation::Relu,
        }
    }
}

impl MlpArch {
    /// Layer dimensions as (in, out) pairs.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input];
        dims.extend(&self.hidden);
        dims.push(self.output);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Total flat parameter count.
    pub fn param_len(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Slices a flat parameter node into per-layer weight/bias nodes.
fn unpack(g: &mut Graph, theta: NodeId, arch: &MlpArch) -> Result<Vec<(NodeId, NodeId)>> {
    let want = arch.param_len();
    let got = g.shape(theta).first().copied().unwrap_or(0);
    if g.shape(theta).len() != 1 || got != want {
        return Err(Error::ParamLength { got, want });
    }
    let mut out = Vec::new();
    let mut off = 0;
    for (i, o) in arch.layers() {
        let w_flat = g.slice(theta, off, i * o)?;
        let w = g.reshape(w_flat, vec![i, o])?;
        off += i * o;
        let b = g.slice(theta, off, o)?;
        off += o;
        out.push((w, b));
    }
    Ok(out)
}

/// Forward pass of the MLP at inputs `x` (a column batch), differentiable in
/// `theta`. Returns the [batch, output] prediction node.
pub fn forward(g: &mut Graph, theta: NodeId, x: NodeId, arch: &MlpArch) -> Result<NodeId> {
    let layers = unpack(g, theta, arch)?;
    let n_layers = layers.len();
    let mut h = x;
    for (li, (w, b)) in layers.into_iter().enumerate() {
        let z = g.matmul(h, w)?;
        let zb = g.bias_add(z, b)?;
        h = if li + 1 < n_layers {
            match arch.activation {
                Activation::Relu => g.relu(zb)?,
                Activation::Tanh => g.tanh(zb)?,
            }
        } else {
            zb
        };
    }
    Ok(h)
}

/// Leaf nodes for a dataset of (x, y) pairs, as [n,1] column batches.
pub fn dataset_leaves(g: &mut Graph, data: &[(f64, f64)]) -> Result<(NodeId, NodeId)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let xs = Tensor::matrix(data.len(), 1, data.iter().map(|p| p.0).collect());
    let ys = Tensor::matrix(data.len(), 1, data.iter().map(|p| p.1).collect());
    Ok((g.leaf(xs), g.leaf(ys)))
}

/// Squared-error loss between predictions and targets, averaged or summed
/// over examples per `form`.
pub fn squared_error(g: &mut Graph, pred: NodeId, target: NodeId, form: LossForm) -> Result<NodeId> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d)?;
    match form {
        LossForm::Mean => g.mean(sq),
        LossForm::Sum => g.sum(sq),
    }
}

/// Regression loss of the base learner on a dataset.
pub fn mse_loss(
    g: &mut Graph,
    theta: NodeId,
    data: &[(f64, f64)],
    arch: &MlpArch,
    form: LossForm,
) -> Result<NodeId> {
    let (x, y) = dataset_leaves(g, data)?;
    let pred = forward(g, theta, x, arch)?;
    squared_error(g, pred, y, form)
}

/// Gradient-descent adaptation from an initialization node, generic over the
/// per-step loss. Returns the adapted parameter node. With `second_order` the
/// result stays differentiable through every inner gradient; otherwise inner
/// gradients are detached (first-order mode).
pub fn inner_adapt<F>(
    g: &mut Graph,
    init: NodeId,
    alpha: f64,
    steps: usize,
    second_order: bool,
    mut loss: F,
) -> Result<NodeId>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    assert!(steps >= 1, "inner adaptation needs at least one step");
    let mut theta = init;
    for step in 0..steps {
        let l = loss(g, theta)?;
        let lv = g.eval(l)?;
        if !lv.item().is_finite() {
            return Err(Error::NonFiniteInnerLoss { step });
        }
        let grad = g.grad(l, &[theta])?[0];
        let grad = if second_order { grad } else { g.detach(grad)? };
        let scaled = g.scalar_mul(grad, alpha)?;
        theta = g.sub(theta, scaled)?;
    }
    Ok(theta)
}

/// Adaptation on a dataset with the squared-error loss.
#[allow(clippy::too_many_arguments)]
pub fn adapt_to_dataset(
    g: &mut Graph,
    init: NodeId,
    data: &[(f64, f64)],
    arch: &MlpArch,
    form: LossForm,
    alpha: f64,
    steps: usize,
    second_order: bool,
) -> Result<NodeId> {
    let arch = arch.clone();
    let data = data.to_vec();
    inner_adapt(g, init, alpha, steps, second_order, move |g, theta| {
        mse_loss(g, theta, &data, &arch, form)
    })
}

/// Initialization for the flat parameter vector: truncated-normal weights
/// (std 0.01), zero biases.
pub fn init_theta(arch: &MlpArch, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(arch.param_len());
    for (i, o) in arch.layers() {
        for _ in 0..i * o {
            data.push(rng.trunc_normal(0.01));
        }
        data.extend(std::iter::repeat_n(0.0, o));
    }
    Tensor::vector(data)
}
