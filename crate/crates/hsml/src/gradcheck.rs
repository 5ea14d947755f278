//! Finite-difference verification utilities.
//!
//! The checks here are independent of the reverse pass they validate: they
//! re-evaluate a function at perturbed inputs and compare central difference
//! quotients against the analytic gradients. Also provides a randomized
//! program generator that produces scalar-valued composites over the full
//! primitive set, used by the gradient-fidelity test suites.

use crate::autodiff::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Central difference step used throughout the verification suites.
pub const FD_STEP: f64 = 1e-5;

/// Relative/absolute tolerance pair.
#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Tolerance {
    pub fn new(rel: f64, abs: f64) -> Self {
        Tolerance { rel, abs }
    }

    pub fn close(&self, got: f64, want: f64) -> bool {
        (got - want).abs() <= self.abs + self.rel * want.abs().max(got.abs())
    }
}

/// Central difference of a scalar function of one coordinate.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

// ── Randomized scalar programs ──────────────────────────────────────

#[derive(Clone, Debug)]
enum StepOp {
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Neg(usize),
    Square(usize),
    Relu(usize),
    Log(usize),
    Recip(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    Scale(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    BiasAdd(usize, usize),
    SumRows(usize),
    Concat(usize, usize),
    Slice(usize, usize, usize),
    Reshape(usize, Vec<usize>),
    Softmax(usize),
    SqDist(usize, usize),
    SumSorted(Vec<usize>),
    MaxPool(Vec<usize>),
    Fill(usize, Vec<usize>),
    Sum(usize),
    Mean(usize),
}

/// A replayable randomly generated program: leaf shapes plus an op sequence.
/// The output is the sum of the means of every intermediate value, so every
/// op lies on a gradient path.
#[derive(Clone, Debug)]
pub struct Program {
    pub leaves: Vec<Tensor>,
    steps: Vec<StepOp>,
}

impl Program {
    /// Builds the program into a graph, returning (leaf ids, scalar output).
    pub fn build(&self, g: &mut Graph, leaf_values: &[Tensor]) -> (Vec<NodeId>, NodeId) {
        let mut vals: Vec<NodeId> = leaf_values.iter().map(|t| g.leaf(t.clone())).collect();
        let leaf_ids = vals.clone();
        for step in &self.steps {
            let id = match step {
                StepOp::Tanh(a) => g.tanh(vals[*a]),
                StepOp::Sigmoid(a) => g.sigmoid(vals[*a]),
                StepOp::Exp(a) => g.exp(vals[*a]),
                StepOp::Neg(a) => g.neg(vals[*a]),
                StepOp::Square(a) => g.square(vals[*a]),
                StepOp::Relu(a) => g.relu(vals[*a]),
                StepOp::Log(a) => g.log(vals[*a]),
                StepOp::Recip(a) => g.recip(vals[*a]),
                StepOp::Add(a, b) => g.add(vals[*a], vals[*b]),
                StepOp::Sub(a, b) => g.sub(vals[*a], vals[*b]),
                StepOp::Mul(a, b) => g.mul(vals[*a], vals[*b]),
                StepOp::ScalarMul(a, c) => g.scalar_mul(vals[*a], *c),
                StepOp::Scale(a, s) => g.scale(vals[*a], vals[*s]),
                StepOp::Matmul(a, b) => g.matmul(vals[*a], vals[*b]),
                StepOp::Transpose(a) => g.transpose(vals[*a]),
                StepOp::BiasAdd(a, b) => g.bias_add(vals[*a], vals[*b]),
                StepOp::SumRows(a) => g.sum_rows(vals[*a]),
                StepOp::Concat(a, b) => g.concat(&[vals[*a], vals[*b]]),
                StepOp::Slice(a, s, l) => g.slice(vals[*a], *s, *l),
                StepOp::Reshape(a, shape) => g.reshape(vals[*a], shape.clone()),
                StepOp::Softmax(a) => g.softmax(vals[*a]),
                StepOp::SqDist(a, b) => g.sq_dist(vals[*a], vals[*b]),
                StepOp::SumSorted(ps) => {
                    let ids: Vec<NodeId> = ps.iter().map(|p| vals[*p]).collect();
                    g.sum_sorted(&ids)
                }
                StepOp::MaxPool(ps) => {
                    let ids: Vec<NodeId> = ps.iter().map(|p| vals[*p]).collect();
                    g.max_pool(&ids)
                }
                StepOp::Fill(s, shape) => g.fill(vals[*s], shape.clone()),
                StepOp::Sum(a) => g.sum(vals[*a]),
                StepOp::Mean(a) => g.mean(vals[*a]),
            }
            .expect("generated program must be shape-consistent");
            vals.push(id);
        }
        // Deterministic scalarization touching every value.
        let mut out = None;
        for v in &vals {
            let m = g.mean(*v).expect("values are non-empty");
            out = Some(match out {
                None => m,
                Some(acc) => g.add(acc, m).expect("scalars"),
            });
        }
        (leaf_ids, out.expect("programs have at least one leaf"))
    }

    /// Scalar value of the program at the given leaves.
    pub fn eval_at(&self, leaf_values: &[Tensor]) -> f64 {
        let mut g = Graph::new();
        let (_, out) = self.build(&mut g, leaf_values);
        g.eval(out).expect("bound leaves").item()
    }
}

fn max_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
}

fn min_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()))
}

fn min_val(t: &Tensor) -> f64 {
    t.data().iter().fold(f64::INFINITY, |acc, v| acc.min(*v))
}

/// Generates a random shape-consistent program, rejecting candidate ops whose
/// concrete values would be numerically unsafe for finite differencing
/// (overflow, or kinks of `relu`/`max_pool` within reach of the FD step).
pub fn random_program(rng: &mut Rng) -> Program {
    let n_leaves = 2 + rng.index(3);
    let mut leaves = Vec::new();
    for _ in 0..n_leaves {
        let shape: Vec<usize> = match rng.index(4) {
            0 => vec![],
            1 => vec![1 + rng.index(4)],
            _ => vec![1 + rng.index(3), 1 + rng.index(3)],
        };
        leaves.push(Tensor::from_fn(&shape, |_| rng.range(-1.5, 1.5)));
    }

    let mut g = Graph::new();
    let mut vals: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let mut steps = Vec::new();
    let target_steps = 4 + rng.index(6);
    let mut attempts = 0;
    while steps.len() < target_steps && attempts < 200 {
        attempts += 1;
        let a = rng.index(vals.len());
        let sa = g.shape(vals[a]).to_vec();
        let va = g.value(vals[a]).expect("eager").clone();
        let pick = rng.index(16);
        let candidate: Option<(StepOp, NodeId)> = match pick {
            14 => Some((StepOp::Sum(a), g.sum(vals[a]).unwrap())),
            15 => match sa.len() {
                2 => {
                    let flat = vec![sa[0] * sa[1]];
                    Some((
                        StepOp::Reshape(a, flat.clone()),
                        g.reshape(vals[a], flat).unwrap(),
                    ))
                }
                _ => Some((StepOp::Mean(a), g.mean(vals[a]).unwrap())),
            },
            0 => Some((StepOp::Tanh(a), g.tanh(vals[a]).unwrap())),
            1 => Some((StepOp::Sigmoid(a), g.sigmoid(vals[a]).unwrap())),
            2 if max_abs(&va) < 3.0 => Some((StepOp::Exp(a), g.exp(vals[a]).unwrap())),
            3 => Some((StepOp::Neg(a), g.neg(vals[a]).unwrap())),
            4 => Some((StepOp::Square(a), g.square(vals[a]).unwrap())),
            5 if min_abs(&va) > 1e-2 => Some((StepOp::Relu(a), g.relu(vals[a]).unwrap())),
            6 if min_val(&va) > 0.1 => Some((StepOp::Log(a), g.log(vals[a]).unwrap())),
            7 if min_abs(&va) > 0.3 => Some((StepOp::Recip(a), g.recip(vals[a]).unwrap())),
            8 => {
                let b = rng.index(vals.len());
                if g.shape(vals[b]) == sa.as_slice() {
                    let op = match rng.index(3) {
                        0 => StepOp::Add(a, b),
                        1 => StepOp::Sub(a, b),
                        _ => StepOp::Mul(a, b),
                    };
                    let id = match &op {
                        StepOp::Add(..) => g.add(vals[a], vals[b]).unwrap(),
                        StepOp::Sub(..) => g.sub(vals[a], vals[b]).unwrap(),
                        _ => g.mul(vals[a], vals[b]).unwrap(),
                    };
                    Some((op, id))
                } else {
                    None
                }
            }
            9 => {
                let c = rng.range(-2.0, 2.0);
                Some((StepOp::ScalarMul(a, c), g.scalar_mul(vals[a], c).unwrap()))
            }
            10 => {
                let b = rng.index(vals.len());
                match (sa.len(), g.shape(vals[b]).len()) {
                    (2, 2) if sa[1] == g.shape(vals[b])[0] => {
                        Some((StepOp::Matmul(a, b), g.matmul(vals[a], vals[b]).unwrap()))
                    }
                    (2, 1) if sa[1] == g.shape(vals[b])[0] => {
                        Some((StepOp::BiasAdd(a, b), g.bias_add(vals[a], vals[b]).unwrap()))
                    }
                    (1, 1) => Some((StepOp::Concat(a, b), g.concat(&[vals[a], vals[b]]).unwrap())),
                    (0, _) if !g.shape(vals[b]).is_empty() => {
                        Some((StepOp::Scale(b, a), g.scale(vals[b], vals[a]).unwrap()))
                    }
                    _ => None,
                }
            }
            11 => match sa.len() {
                2 => Some((StepOp::Transpose(a), g.transpose(vals[a]).unwrap())),
                1 if sa[0] > 1 => {
                    let len = 1 + rng.index(sa[0] - 1);
                    let start = rng.index(sa[0] - len + 1);
                    Some((
                        StepOp::Slice(a, start, len),
                        g.slice(vals[a], start, len).unwrap(),
                    ))
                }
                _ => None,
            },
            12 => match sa.len() {
                1 if sa[0] <= 6 && max_abs(&va) < 20.0 => {
                    Some((StepOp::Softmax(a), g.softmax(vals[a]).unwrap()))
                }
                2 => Some((StepOp::SumRows(a), g.sum_rows(vals[a]).unwrap())),
                0 => {
                    let shape = vec![1 + rng.index(3)];
                    Some((
                        StepOp::Fill(a, shape.clone()),
                        g.fill(vals[a], shape).unwrap(),
                    ))
                }
                _ => None,
            },
            _ => {
                let b = rng.index(vals.len());
                if g.shape(vals[b]) != sa.as_slice() {
                    None
                } else {
                    match rng.index(3) {
                        0 => Some((StepOp::SqDist(a, b), g.sq_dist(vals[a], vals[b]).unwrap())),
                        1 => Some((
                            StepOp::SumSorted(vec![a, b]),
                            g.sum_sorted(&[vals[a], vals[b]]).unwrap(),
                        )),
                        _ => {
                            // Reject near-ties, which put a max kink within FD reach.
                            let vb = g.value(vals[b]).expect("eager");
                            let tied = va
                                .data()
                                .iter()
                                .zip(vb.data().iter())
                                .any(|(x, y)| (x - y).abs() < 1e-2);
                            if tied {
                                None
                            } else {
                                Some((
                                    StepOp::MaxPool(vec![a, b]),
                                    g.max_pool(&[vals[a], vals[b]]).unwrap(),
                                ))
                            }
                        }
                    }
                }
            }
        };
        if let Some((op, id)) = candidate {
            let v = g.value(id).expect("eager");
            if v.all_finite() && max_abs(v) < 100.0 {
                steps.push(op);
                vals.push(id);
            }
        }
    }
    Program { leaves, steps }
}

/// Checks analytic gradients of a program against central finite differences
/// over every coordinate of every leaf. Returns the first failure rendered as
/// a human-readable message.
pub fn check_program(prog: &Program, tol: Tolerance, step: f64) -> Result<(), String> {
    let mut g = Graph::new();
    let (leaf_ids, out) = prog.build(&mut g, &prog.leaves);
    let grads = g
        .grad(out, &leaf_ids)
        .map_err(|e| format!("grad failed: {e}"))?;
    for (li, gid) in grads.iter().enumerate() {
        let analytic = g.eval(*gid).map_err(|e| e.to_string())?;
        for c in 0..prog.leaves[li].numel() {
            let fd = central_diff(
                |v| {
                    let mut leaves = prog.leaves.clone();
                    let mut data = leaves[li].data().to_vec();
                    data[c] = v;
                    leaves[li] = Tensor::new(leaves[li].shape().to_vec(), data);
                    prog.eval_at(&leaves)
                },
                prog.leaves[li].data()[c],
                step,
            );
            let got = analytic.data()[c];
            if !tol.close(got, fd) {
                return Err(format!(
                    "leaf {li} coord {c}: analytic {got:.9e} vs finite difference {fd:.9e}"
                ));
            }
        }
    }
    Ok(())
}
