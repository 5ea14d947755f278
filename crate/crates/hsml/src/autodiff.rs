//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is an append-only tape of [`Node`]s. Building an op computes
//! its forward value immediately when all inputs are available, so a finished
//! expression is also already evaluated. The backward pass ([`Graph::grad`])
//! emits new nodes into the *same* graph, with every derivative expressed in
//! terms of the primitive ops themselves; gradients are therefore ordinary
//! nodes and can be differentiated again, which is what carries exact
//! second-order meta-gradients through inner-loop updates.
//!
//! Determinism: every reduction (sum, mean, matmul accumulation, softmax
//! normalizer) runs in a fixed order with no reassociation, so re-evaluating
//! the same graph is bit-identical. The only deliberately order-free
//! reductions are [`Graph::sum_sorted`] and [`Graph::max_pool`], which
//! combine a *set* of same-shaped nodes in a canonical per-coordinate order
//! and are bit-exactly invariant under permutation of their operands.
//!
//! There is no broadcasting beyond [`Graph::bias_add`] and the explicit
//! scalar ops; all other shape mismatches are construction-time errors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
pub enum Op {
    /// Leaf bound at creation: constants, inputs, parameters.
    Leaf,
    /// Leaf bound later via [`Graph::bind`].
    Placeholder,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Multiply by a compile-time scalar (not a node; has no gradient of its own).
    ScalarMul(NodeId, f64),
    /// Multiply a tensor by a scalar-valued node.
    Scale { x: NodeId, s: NodeId },
    Neg(NodeId),
    Square(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Recip(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    /// Heaviside step (1 for x > 0, else 0); derivative defined as zero.
    Step(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    /// Row-broadcast bias: [m,n] + [n].
    BiasAdd { x: NodeId, bias: NodeId },
    /// Column sums: [m,n] -> [n].
    SumRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Broadcast a scalar node to this node's shape.
    Fill { s: NodeId },
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize, len: usize },
    /// Embed a vector into a longer zero vector at `start`.
    Pad { x: NodeId, start: usize },
    Reshape(NodeId),
    /// Softmax over the last (only) axis of a vector.
    Softmax(NodeId),
    /// Squared Euclidean distance, reduced to a scalar.
    SqDist(NodeId, NodeId),
    /// Elementwise sum of same-shaped operands in sorted-value order
    /// (bit-exactly permutation invariant).
    SumSorted(Vec<NodeId>),
    /// Elementwise max of same-shaped operands.
    MaxPool(Vec<NodeId>),
}

impl Op {
    fn for_each_parent(&self, mut f: impl FnMut(NodeId)) {
        match self {
            Op::Leaf | Op::Placeholder => {}
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Matmul(a, b)
            | Op::SqDist(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Scale { x, s } => {
                f(*x);
                f(*s);
            }
            Op::BiasAdd { x, bias } => {
                f(*x);
                f(*bias);
            }
            Op::ScalarMul(a, _)
            | Op::Neg(a)
            | Op::Square(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Step(a)
            | Op::Transpose(a)
            | Op::SumRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Fill { s: a }
            | Op::Slice { x: a, .. }
            | Op::Pad { x: a, .. }
            | Op::Reshape(a)
            | Op::Softmax(a) => f(*a),
            Op::Concat(ps) | Op::SumSorted(ps) | Op::MaxPool(ps) => {
                for p in ps {
                    f(*p);
                }
            }
        }
    }
}

#[derive(Debug)]
pub struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
    value: Option<Tensor>,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Cached forward value, if this node has been evaluated.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("parent value missing during forward computation")
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let mut ready = true;
        op.for_each_parent(|p| ready &= self.nodes[p.0].value.is_some());
        self.nodes.push(Node {
            op,
            shape,
            value: None,
        });
        if ready {
            let v = self.compute(id.0);
            self.nodes[id.0].value = Some(v);
        }
        id
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: Some(t),
        });
        id
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn placeholder(&mut self, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Placeholder,
            shape,
            value: None,
        });
        id
    }

    /// Binds a placeholder leaf. Dependents are computed lazily by `eval`.
    pub fn bind(&mut self, id: NodeId, t: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        match node.op {
            Op::Placeholder => {
                if node.shape != t.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "bind",
                        lhs: node.shape.clone(),
                        rhs: t.shape().to_vec(),
                    });
                }
                node.value = Some(t);
                Ok(())
            }
            _ => Err(Error::NotAPlaceholder(id.0)),
        }
    }

    /// Re-evaluates the value of a node, computing any still-unevaluated
    /// ancestors in topological (id) order. Errors if an ancestor is an
    /// unbound placeholder.
    pub fn eval(&mut self, id: NodeId) -> Result<Tensor> {
        if let Some(v) = &self.nodes[id.0].value {
            return Ok(v.clone());
        }
        let anc = self.ancestors(id);
        #[allow(clippy::needless_range_loop)] // id-order walk over two arrays
        for i in 0..=id.0 {
            if !anc[i] || self.nodes[i].value.is_some() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Placeholder) {
                return Err(Error::UnboundLeaf(i));
            }
            let v = self.compute(i);
            self.nodes[i].value = Some(v);
        }
        Ok(self.nodes[id.0].value.clone().expect("evaluated above"))
    }

    /// Evaluates a node and freezes the result as a fresh leaf, cutting the
    /// gradient path (used by first-order adaptation).
    pub fn detach(&mut self, id: NodeId) -> Result<NodeId> {
        let v = self.eval(id)?;
        Ok(self.leaf(v))
    }

    fn ancestors(&self, root: NodeId) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![root.0];
        while let Some(i) = stack.pop() {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            self.nodes[i].op.for_each_parent(|p| {
                if !seen[p.0] {
                    stack.push(p.0);
                }
            });
        }
        seen
    }

    // ── Shape-checked constructors ──────────────────────────────────

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::ScalarMul(a, c), shape))
    }

    pub fn scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.nodes[s.0].shape.is_empty() {
            return Err(Error::BadShape {
                op: "scale",
                expected: "scalar multiplier",
                got: self.nodes[s.0].shape.clone(),
            });
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Scale { x, s }, shape))
    }

    fn unary(&mut self, make: impl FnOnce(NodeId) -> Op, a: NodeId) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        self.push(make(a), shape)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Neg, a))
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Square, a))
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Exp, a))
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Log, a))
    }
    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Recip, a))
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Tanh, a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Sigmoid, a))
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Relu, a))
    }
    pub fn step(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Step, a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::Matmul(a, b), shape))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 {
            return Err(Error::BadShape {
                op: "transpose",
                expected: "rank-2 tensor",
                got: sa.clone(),
            });
        }
        let shape = vec![sa[1], sa[0]];
        Ok(self.push(Op::Transpose(a), shape))
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[bias.0].shape);
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: sx.clone(),
                rhs: sb.clone(),
            });
        }
        let shape = sx.clone();
        Ok(self.push(Op::BiasAdd { x, bias }, shape))
    }

    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 2 {
            return Err(Error::BadShape {
                op: "sum_rows",
                expected: "rank-2 tensor",
                got: sx.clone(),
            });
        }
        let shape = vec![sx[1]];
        Ok(self.push(Op::SumRows(x), shape))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.push(Op::Sum(x), vec![]))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n: usize = self.nodes[x.0].shape.iter().product();
        if n == 0 {
            return Err(Error::BadShape {
                op: "mean",
                expected: "non-empty tensor",
                got: self.nodes[x.0].shape.clone(),
            });
        }
        Ok(self.push(Op::Mean(x), vec![]))
    }

    pub fn fill(&mut self, s: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if !self.nodes[s.0].shape.is_empty() {
            return Err(Error::BadShape {
                op: "fill",
                expected: "scalar source",
                got: self.nodes[s.0].shape.clone(),
            });
        }
        Ok(self.push(Op::Fill { s }, shape))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat",
                expected: "at least one operand",
                got: vec![],
            });
        }
        let mut total = 0;
        for p in parts {
            let sp = &self.nodes[p.0].shape;
            if sp.len() != 1 {
                return Err(Error::BadShape {
                    op: "concat",
                    expected: "rank-1 operands",
                    got: sp.clone(),
                });
            }
            total += sp[0];
        }
        Ok(self.push(Op::Concat(parts.to_vec()), vec![total]))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 1 || start + len > sx[0] || len == 0 {
            return Err(Error::BadShape {
                op: "slice",
                expected: "rank-1 tensor covering the requested range",
                got: sx.clone(),
            });
        }
        Ok(self.push(Op::Slice { x, start, len }, vec![len]))
    }

    pub fn pad(&mut self, x: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 1 || start + sx[0] > total {
            return Err(Error::BadShape {
                op: "pad",
                expected: "rank-1 tensor fitting the padded length",
                got: sx.clone(),
            });
        }
        Ok(self.push(Op::Pad { x, start }, vec![total]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let sx = &self.nodes[x.0].shape;
        if sx.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: sx.clone(),
                rhs: shape,
            });
        }
        Ok(self.push(Op::Reshape(x), shape))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 1 || sx[0] == 0 {
            return Err(Error::BadShape {
                op: "softmax",
                expected: "non-empty rank-1 tensor",
                got: sx.clone(),
            });
        }
        let shape = sx.clone();
        Ok(self.push(Op::Softmax(x), shape))
    }

    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sq_dist", a, b)?;
        Ok(self.push(Op::SqDist(a, b), vec![]))
    }

    pub fn sum_sorted(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let shape = self.variadic_shape("sum_sorted", parts)?;
        Ok(self.push(Op::SumSorted(parts.to_vec()), shape))
    }

    pub fn max_pool(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let shape = self.variadic_shape("max_pool", parts)?;
        Ok(self.push(Op::MaxPool(parts.to_vec()), shape))
    }

    fn variadic_shape(&self, op: &'static str, parts: &[NodeId]) -> Result<Vec<usize>> {
        let first = parts.first().ok_or(Error::BadShape {
            op,
            expected: "at least one operand",
            got: vec![],
        })?;
        let shape = self.nodes[first.0].shape.clone();
        for p in &parts[1..] {
            if self.nodes[p.0].shape != shape {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: shape,
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        Ok(shape)
    }

    // ── Composites ──────────────────────────────────────────────────

    /// [m,n] matrix times [n] vector -> [m], via reshape + matmul.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let n = match self.nodes[x.0].shape.as_slice() {
            [n] => *n,
            other => {
                return Err(Error::BadShape {
                    op: "matvec",
                    expected: "rank-1 vector operand",
                    got: other.to_vec(),
                })
            }
        };
        let m = self.nodes[w.0].shape[0];
        let col = self.reshape(x, vec![n, 1])?;
        let prod = self.matmul(w, col)?;
        self.reshape(prod, vec![m])
    }

    /// matvec plus bias vector.
    pub fn affine_vec(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    /// Canonical-order mean over a set of same-shaped nodes.
    pub fn mean_pool(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let s = self.sum_sorted(parts)?;
        self.scalar_mul(s, 1.0 / parts.len() as f64)
    }

    // ── Forward kernels ─────────────────────────────────────────────

    fn compute(&self, i: usize) -> Tensor {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Placeholder => unreachable!("leaves carry their value"),
            Op::Add(a, b) => zip_map(self.val(*a), self.val(*b), |x, y| x + y),
            Op::Sub(a, b) => zip_map(self.val(*a), self.val(*b), |x, y| x - y),
            Op::Mul(a, b) => zip_map(self.val(*a), self.val(*b), |x, y| x * y),
            Op::ScalarMul(a, c) => map(self.val(*a), |x| x * c),
            Op::Scale { x, s } => {
                let c = self.val(*s).item();
                map(self.val(*x), |v| v * c)
            }
            Op::Neg(a) => map(self.val(*a), |x| -x),
            Op::Square(a) => map(self.val(*a), |x| x * x),
            Op::Exp(a) => map(self.val(*a), f64::exp),
            Op::Log(a) => map(self.val(*a), f64::ln),
            Op::Recip(a) => map(self.val(*a), |x| 1.0 / x),
            Op::Tanh(a) => map(self.val(*a), f64::tanh),
            Op::Sigmoid(a) => map(self.val(*a), sigmoid),
            Op::Relu(a) => map(self.val(*a), |x| if x > 0.0 { x } else { 0.0 }),
            Op::Step(a) => map(self.val(*a), |x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Matmul(a, b) => matmul(self.val(*a), self.val(*b)),
            Op::Transpose(a) => {
                let t = self.val(*a);
                let (m, n) = (t.shape()[0], t.shape()[1]);
                let d = t.data();
                let mut out = vec![0.0; m * n];
                for r in 0..m {
                    let row = &d[r * n..(r + 1) * n];
                    for (c, v) in row.iter().enumerate() {
                        out[c * m + r] = *v;
                    }
                }
                Tensor::matrix(n, m, out)
            }
            Op::BiasAdd { x, bias } => {
                let xv = self.val(*x);
                let bv = self.val(*bias);
                let n = xv.shape()[1];
                let (xd, bd) = (xv.data(), bv.data());
                Tensor::new(
                    xv.shape().to_vec(),
                    xd.iter().enumerate().map(|(i, v)| v + bd[i % n]).collect(),
                )
            }
            Op::SumRows(a) => {
                let t = self.val(*a);
                let (m, n) = (t.shape()[0], t.shape()[1]);
                let d = t.data();
                let mut out = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        out[c] += d[r * n + c];
                    }
                }
                Tensor::vector(out)
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).data().iter().fold(0.0, |acc, v| acc + v)),
            Op::Mean(a) => {
                let t = self.val(*a);
                let s = t.data().iter().fold(0.0, |acc, v| acc + v);
                Tensor::scalar(s / t.numel() as f64)
            }
            Op::Fill { s } => Tensor::full(&node.shape, self.val(*s).item()),
            Op::Concat(parts) => {
                let mut out = Vec::new();
                for p in parts {
                    out.extend_from_slice(self.val(*p).data());
                }
                Tensor::vector(out)
            }
            Op::Slice { x, start, len } => {
                Tensor::vector(self.val(*x).data()[*start..start + len].to_vec())
            }
            Op::Pad { x, start } => {
                let total = node.shape[0];
                let src = self.val(*x).data();
                let mut out = vec![0.0; total];
                out[*start..start + src.len()].copy_from_slice(src);
                Tensor::vector(out)
            }
            Op::Reshape(a) => self.val(*a).reshaped(node.shape.clone()),
            Op::Softmax(a) => {
                let d = self.val(*a).data();
                let m = d.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(*v));
                let exps: Vec<f64> = d.iter().map(|v| (v - m).exp()).collect();
                let z = exps.iter().fold(0.0, |acc, v| acc + v);
                Tensor::vector(exps.iter().map(|e| e / z).collect())
            }
            Op::SqDist(a, b) => {
                let (da, db) = (self.val(*a).data(), self.val(*b).data());
                let mut acc = 0.0;
                for (x, y) in da.iter().zip(db.iter()) {
                    let d = x - y;
                    acc += d * d;
                }
                Tensor::scalar(acc)
            }
            Op::SumSorted(parts) => {
                let vals: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                let n = vals[0].numel();
                let mut out = vec![0.0; n];
                let mut buf = vec![0.0; parts.len()];
                for (c, slot) in out.iter_mut().enumerate() {
                    for (k, v) in vals.iter().enumerate() {
                        buf[k] = v.data()[c];
                    }
                    buf.sort_by(|a, b| a.total_cmp(b));
                    *slot = buf.iter().fold(0.0, |acc, v| acc + v);
                }
                Tensor::new(node.shape.clone(), out)
            }
            Op::MaxPool(parts) => {
                let vals: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                let n = vals[0].numel();
                Tensor::new(
                    node.shape.clone(),
                    (0..n)
                        .map(|c| {
                            vals.iter()
                                .map(|v| v.data()[c])
                                .fold(f64::NEG_INFINITY, f64::max)
                        })
                        .collect(),
                )
            }
        }
    }

    // ── Reverse pass ────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `output` with respect to each node
    /// in `wrt` (positionally). Gradients are new nodes in this graph and can
    /// themselves be differentiated. Nodes that cannot reach `output` get an
    /// exact-zero gradient leaf.
    ///
    /// The sweep is restricted to nodes lying on a path from some `wrt` node
    /// to the output; adjoints elsewhere cannot influence the requested
    /// gradients, so no backward nodes are built for them.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if !self.nodes[output.0].shape.is_empty() {
            return Err(Error::NonScalarOutput(self.nodes[output.0].shape.clone()));
        }
        let anc = self.ancestors(output);
        // dep[i]: node i computationally depends on some wrt node.
        let mut dep = vec![false; output.0 + 1];
        for w in wrt {
            if w.0 <= output.0 {
                dep[w.0] = true;
            }
        }
        for i in 0..=output.0 {
            if dep[i] {
                continue;
            }
            let mut d = false;
            self.nodes[i]
                .op
                .for_each_parent(|p| d |= p.0 <= output.0 && dep[p.0]);
            if d {
                dep[i] = true;
            }
        }
        let mut adj: Vec<Option<NodeId>> = vec![None; output.0 + 1];
        if dep[output.0] {
            adj[output.0] = Some(self.scalar(1.0));
        }
        for i in (0..=output.0).rev() {
            if adj[i].is_none() || !anc[i] || !dep[i] {
                continue;
            }
            let g = adj[i].expect("checked above");
            self.emit_vjps(i, g, &mut adj, &dep)?;
        }
        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(gid) => Ok(gid),
                None => {
                    let shape = self.nodes[w.0].shape.clone();
                    Ok(self.leaf(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    fn accum(&mut self, adj: &mut [Option<NodeId>], p: NodeId, c: NodeId) -> Result<()> {
        adj[p.0] = Some(match adj[p.0] {
            Some(prev) => self.add(prev, c)?,
            None => c,
        });
        Ok(())
    }

    fn ones_like(&mut self, id: NodeId) -> NodeId {
        let shape = self.nodes[id.0].shape.clone();
        self.leaf(Tensor::full(&shape, 1.0))
    }

    fn emit_vjps(
        &mut self,
        i: usize,
        g: NodeId,
        adj: &mut [Option<NodeId>],
        dep: &[bool],
    ) -> Result<()> {
        let y = NodeId(i);
        let on = |p: NodeId| dep[p.0];
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf | Op::Placeholder => {}
            Op::Add(a, b) => {
                if on(a) {
                    self.accum(adj, a, g)?;
                }
                if on(b) {
                    self.accum(adj, b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if on(a) {
                    self.accum(adj, a, g)?;
                }
                if on(b) {
                    let nb = self.neg(g)?;
                    self.accum(adj, b, nb)?;
                }
            }
            Op::Mul(a, b) => {
                if on(a) {
                    let ca = self.mul(g, b)?;
                    self.accum(adj, a, ca)?;
                }
                if on(b) {
                    let cb = self.mul(g, a)?;
                    self.accum(adj, b, cb)?;
                }
            }
            Op::ScalarMul(a, c) => {
                if on(a) {
                    let ca = self.scalar_mul(g, c)?;
                    self.accum(adj, a, ca)?;
                }
            }
            Op::Scale { x, s } => {
                if on(x) {
                    let cx = self.scale(g, s)?;
                    self.accum(adj, x, cx)?;
                }
                if on(s) {
                    let gx = self.mul(g, x)?;
                    let cs = self.sum(gx)?;
                    self.accum(adj, s, cs)?;
                }
            }
            Op::Neg(a) => {
                if on(a) {
                    let c = self.neg(g)?;
                    self.accum(adj, a, c)?;
                }
            }
            Op::Square(a) => {
                if on(a) {
                    let two_a = self.scalar_mul(a, 2.0)?;
                    let c = self.mul(g, two_a)?;
                    self.accum(adj, a, c)?;
                }
            }
            Op::Exp(a) => {
                if on(a) {
                    let c = self.mul(g, y)?;
                    self.accum(adj, a, c)?;
                }
            }
            Op::Log(a) => {
                if on(a) {
                    let r = self.recip(a)?;
                    let c = self.mul(g, r)?;
                    self.accum(adj, a, c)?;
                }
            }
            Op::Recip(a) => {
                if on(a) {
                    let y2 = self.square(y)?;
                    let gy2 = self.mul(g, y2)?;
                    let c = self.neg(gy2)?;
                    self.accum(adj, a, c)?;
                }
            }
            Op::Tanh(a) => {
                if on(a) {
                    let ones = self.ones_like(y);
                    let y2 = self.square(y)?;
                    let d = self.sub(ones, y2)?;
                    let c = self.mul(g, d)?;
                    self.accum(adj, a, c)?;
                }
            }
            Op::Sigmoid(a) => {
                if on(a) {
                    let ones = self.ones_like(y);
                    let om = self.sub(ones, y)?;
                    let yom = self.mul(y, om)?;
                    let c = self.mul(g, yom)?;
                    self.accum(adj, a, c)?;
                }
            }
            Op::Relu(a) => {
                if on(a) {
                    let m = self.step(a)?;
                    let c = self.mul(g, m)?;
                    self.accum(adj, a, c)?;
                }
            }
            Op::Step(_) => {}
            Op::Matmul(a, b) => {
                if on(a) {
                    let bt = self.transpose(b)?;
                    let ca = self.matmul(g, bt)?;
                    self.accum(adj, a, ca)?;
                }
                if on(b) {
                    let at = self.transpose(a)?;
                    let cb = self.matmul(at, g)?;
                    self.accum(adj, b, cb)?;
                }
            }
            Op::Transpose(a) => {
                if on(a) {
                    let c = self.transpose(g)?;
                    self.accum(adj, a, c)?;
                }
            }
            Op::BiasAdd { x, bias } => {
                if on(x) {
                    self.accum(adj, x, g)?;
                }
                if on(bias) {
                    let cb = self.sum_rows(g)?;
                    self.accum(adj, bias, cb)?;
                }
            }
            Op::SumRows(a) => {
                if on(a) {
                    let shape = self.nodes[a.0].shape.clone();
                    let zeros = self.leaf(Tensor::zeros(&shape));
                    let c = self.bias_add(zeros, g)?;
                    self.accum(adj, a, c)?;
                }
            }
            Op::Sum(a) => {
                if on(a) {
                    let shape = self.nodes[a.0].shape.clone();
                    let c = self.fill(g, shape)?;
                    self.accum(adj, a, c)?;
                }
            }
            Op::Mean(a) => {
                if on(a) {
                    let shape = self.nodes[a.0].shape.clone();
                    let n: usize = shape.iter().product();
                    let f = self.fill(g, shape)?;
                    let c = self.scalar_mul(f, 1.0 / n as f64)?;
                    self.accum(adj, a, c)?;
                }
            }
            Op::Fill { s } => {
                if on(s) {
                    let c = self.sum(g)?;
                    self.accum(adj, s, c)?;
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].shape[0];
                    if on(p) {
                        let c = self.slice(g, off, len)?;
                        self.accum(adj, p, c)?;
                    }
                    off += len;
                }
            }
            Op::Slice { x, start, .. } => {
                if on(x) {
                    let total = self.nodes[x.0].shape[0];
                    let c = self.pad(g, start, total)?;
                    self.accum(adj, x, c)?;
                }
            }
            Op::Pad { x, start } => {
                if on(x) {
                    let len = self.nodes[x.0].shape[0];
                    let c = self.slice(g, start, len)?;
                    self.accum(adj, x, c)?;
                }
            }
            Op::Reshape(a) => {
                if on(a) {
                    let shape = self.nodes[a.0].shape.clone();
                    let c = self.reshape(g, shape)?;
                    self.accum(adj, a, c)?;
                }
            }
            Op::Softmax(a) => {
                if on(a) {
                    let gy = self.mul(g, y)?;
                    let s = self.sum(gy)?;
                    let shape = self.nodes[a.0].shape.clone();
                    let f = self.fill(s, shape)?;
                    let d = self.sub(g, f)?;
                    let c = self.mul(y, d)?;
                    self.accum(adj, a, c)?;
                }
            }
            Op::SqDist(a, b) => {
                let two_g = self.scalar_mul(g, 2.0)?;
                if on(a) {
                    let d = self.sub(a, b)?;
                    let ca = self.scale(d, two_g)?;
                    self.accum(adj, a, ca)?;
                }
                if on(b) {
                    let d = self.sub(b, a)?;
                    let cb = self.scale(d, two_g)?;
                    self.accum(adj, b, cb)?;
                }
            }
            Op::SumSorted(parts) => {
                for p in parts {
                    if on(p) {
                        self.accum(adj, p, g)?;
                    }
                }
            }
            Op::MaxPool(parts) => {
                for p in parts {
                    if on(p) {
                        let diff = self.sub(y, p)?;
                        let hit = self.step(diff)?;
                        let ones = self.ones_like(p);
                        let mask = self.sub(ones, hit)?;
                        let c = self.mul(g, mask)?;
                        self.accum(adj, p, c)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| f(*x, *y))
            .collect(),
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    if n == 1 {
        // Matrix-vector: contiguous dot product per row.
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(bd.iter()) {
                acc += av * bv;
            }
            out[i] = acc;
        }
    } else {
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &bd[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    Tensor::matrix(m, n, out)
}
