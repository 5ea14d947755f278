//! Cluster-specific parameter gate.
//!
//! One sigmoid-activated fully connected layer maps the concatenation of the
//! task representation and the final clustering representation to a mask the
//! length of the flat base-learner parameter vector. The gated initialization
//! is the elementwise product of the shared initialization with that mask —
//! one sigmoid per scalar parameter.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{init_normal, BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

const W_NAME: &str = "gate.w";
const B_NAME: &str = "gate.b";

/// Registers the gate layer: [theta_len, 2d] kernel (normal, std 0.01) and a
/// zero bias, so training starts near the unbiased half mask o = 0.5.
pub fn init_params(store: &mut ParamStore, repr_dim: usize, theta_len: usize, rng: &mut Rng) {
    store.insert(W_NAME, init_normal(&[theta_len, 2 * repr_dim], 0.01, rng));
    store.insert(B_NAME, Tensor::zeros(&[theta_len]));
}

/// o = sigmoid(W_g (g_i ++ h_L) + b), in (0, 1)^theta_len.
pub fn forward(
    g: &mut Graph,
    bound: &BoundParams,
    task_repr: NodeId,
    cluster_repr: NodeId,
) -> Result<NodeId> {
    let gh = g.concat(&[task_repr, cluster_repr])?;
    let w = bound.get(W_NAME)?;
    let b = bound.get(B_NAME)?;
    let z = g.affine_vec(w, gh, b)?;
    g.sigmoid(z)
}

/// Gated initialization: theta_0 ∘ o, elementwise.
pub fn apply(g: &mut Graph, theta0: NodeId, mask: NodeId) -> Result<NodeId> {
    let (st, sm) = (g.shape(theta0), g.shape(mask));
    if st != sm {
        return Err(Error::ShapeMismatch {
            op: "apply_gate",
            lhs: st.to_vec(),
            rhs: sm.to_vec(),
        });
    }
    g.mul(theta0, mask)
}
