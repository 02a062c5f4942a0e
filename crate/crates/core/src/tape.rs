//! Define-by-run reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive operation of one forward pass; a
//! single [`Tape::backward`] sweep then accumulates gradients into every
//! recorded node. The tape is rebuilt for each forward pass and is confined
//! to one thread. [`Var`] is a cheap copyable handle into the tape.
//!
//! Gradient flow is tracked per node: an operation's output requires
//! gradients iff any input does, and backward skips accumulation into
//! nodes that do not, so constant data (input batches) costs nothing
//! beyond the forward arithmetic.

use std::cell::RefCell;

use crate::tensor::{sigmoid, Tensor, TensorError};

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Square { a: usize },
    Abs { a: usize },
    Exp { a: usize },
    Log { a: usize },
    // log(max(x, floor)); zero slope inside the clamped region
    GuardedLog { a: usize, floor: f64 },
    Sigmoid { a: usize },
    Relu { a: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Sum { a: usize },
    Reshape { a: usize },
    StackRows { rows: Vec<usize> },
    SoftmaxCrossEntropy { logits: usize, probs: Vec<f64>, labels: Vec<usize> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    requires: bool,
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Records one forward pass for reverse-mode differentiation.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                backward_done: false,
            }),
        }
    }

    /// Copies a tensor onto the tape as a leaf. Gradient tracking follows
    /// the tensor's `requires_grad` flag.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Constant scalar leaf.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(vec![], vec![value], false, Op::Leaf)
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, requires: bool, op: Op) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        let grad = vec![0.0; data.len()];
        inner.nodes.push(Node {
            shape,
            data,
            grad,
            requires,
            op,
        });
        Var { tape: self, idx }
    }

    fn push_checked(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires: bool,
        op: Op,
    ) -> Result<Var<'_>, TensorError> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        Ok(self.push(shape, data, requires, op))
    }

    /// Stacks `1 x k` rows into a `B x k` matrix.
    pub fn stack_rows<'t>(&'t self, rows: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        assert!(!rows.is_empty(), "stack_rows needs at least one row");
        let (width, requires) = {
            let inner = self.inner.borrow();
            let first = &inner.nodes[rows[0].idx];
            if first.shape.len() != 2 || first.shape[0] != 1 {
                return Err(TensorError::RankMismatch {
                    op: "stack_rows",
                    expected: 2,
                    shape: first.shape.clone(),
                });
            }
            let width = first.shape[1];
            let mut requires = false;
            for row in rows {
                let node = &inner.nodes[row.idx];
                if node.shape != [1, width] {
                    return Err(TensorError::ShapeMismatch {
                        op: "stack_rows",
                        left: vec![1, width],
                        right: node.shape.clone(),
                    });
                }
                requires |= node.requires;
            }
            (width, requires)
        };
        let mut data = Vec::with_capacity(rows.len() * width);
        {
            let inner = self.inner.borrow();
            for row in rows {
                data.extend_from_slice(&inner.nodes[row.idx].data);
            }
        }
        self.push_checked(
            "stack_rows",
            vec![rows.len(), width],
            data,
            requires,
            Op::StackRows {
                rows: rows.iter().map(|r| r.idx).collect(),
            },
        )
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max-subtraction. `logits` must be `B x K`; labels index into `[0, K)`.
    pub fn softmax_cross_entropy<'t>(
        &'t self,
        logits: Var<'t>,
        labels: &[usize],
    ) -> Result<Var<'t>, TensorError> {
        let (requires, probs, loss) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[logits.idx];
            if node.shape.len() != 2 {
                return Err(TensorError::RankMismatch {
                    op: "softmax_cross_entropy",
                    expected: 2,
                    shape: node.shape.clone(),
                });
            }
            let (batch, classes) = (node.shape[0], node.shape[1]);
            if labels.len() != batch {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    left: vec![batch, classes],
                    right: vec![labels.len()],
                });
            }
            for &label in labels {
                if label >= classes {
                    return Err(TensorError::LabelOutOfRange { label, classes });
                }
            }
            let mut probs = vec![0.0; batch * classes];
            let mut loss = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                let row = &node.data[i * classes..(i + 1) * classes];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    probs[i * classes + j] = e;
                    denom += e;
                }
                for p in &mut probs[i * classes..(i + 1) * classes] {
                    *p /= denom;
                }
                // -log softmax[label] = log(denom) - (logit - max)
                loss += denom.ln() - (row[label] - max);
            }
            loss /= batch as f64;
            (node.requires, probs, loss)
        };
        self.push_checked(
            "softmax_cross_entropy",
            vec![],
            vec![loss],
            requires,
            Op::SoftmaxCrossEntropy {
                logits: logits.idx,
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Propagates a unit gradient from a scalar loss back through the tape.
    ///
    /// Every node reachable from `loss` that requires gradients ends up with
    /// its accumulated gradient, readable through [`Var::grad`]. A second
    /// call on the same tape is rejected.
    pub fn backward(&self, loss: Var<'_>) -> Result<(), TensorError> {
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let loss_shape = inner.nodes[loss.idx].shape.clone();
        if !loss_shape.is_empty() {
            return Err(TensorError::NonScalarLoss { shape: loss_shape });
        }
        inner.backward_done = true;
        inner.nodes[loss.idx].grad[0] = 1.0;

        for i in (0..inner.nodes.len()).rev() {
            if !inner.nodes[i].requires {
                continue;
            }
            // Split borrows: the node being processed vs. its inputs.
            let (head, tail) = inner.nodes.split_at_mut(i);
            let node = &tail[0];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (head[*a].shape[0], head[*a].shape[1]);
                    let n = head[*b].shape[1];
                    let g = &node.grad;
                    if head[*a].requires {
                        // grad_a += g . b^T
                        let bdat = head[*b].data.clone();
                        let ga = &mut head[*a].grad;
                        for r in 0..m {
                            for c in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[r * n + j] * bdat[c * n + j];
                                }
                                ga[r * k + c] += s;
                            }
                        }
                    }
                    if head[*b].requires {
                        // grad_b += a^T . g
                        let adat = head[*a].data.clone();
                        let gb = &mut head[*b].grad;
                        for r in 0..k {
                            for c in 0..n {
                                let mut s = 0.0;
                                for j in 0..m {
                                    s += adat[j * k + r] * g[j * n + c];
                                }
                                gb[r * n + c] += s;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    let g = node.grad.clone();
                    if head[*a].requires {
                        accumulate(&mut head[*a].grad, &g, |_, gi| gi);
                    }
                    if head[*b].requires {
                        accumulate(&mut head[*b].grad, &g, |_, gi| gi);
                    }
                }
                Op::Sub { a, b } => {
                    let g = node.grad.clone();
                    if head[*a].requires {
                        accumulate(&mut head[*a].grad, &g, |_, gi| gi);
                    }
                    if head[*b].requires {
                        accumulate(&mut head[*b].grad, &g, |_, gi| -gi);
                    }
                }
                Op::Mul { a, b } => {
                    let g = node.grad.clone();
                    if head[*a].requires {
                        let bdat = head[*b].data.clone();
                        let ga = &mut head[*a].grad;
                        for (i, gi) in g.iter().enumerate() {
                            ga[i] += gi * bdat[i];
                        }
                    }
                    if head[*b].requires {
                        let adat = head[*a].data.clone();
                        let gb = &mut head[*b].grad;
                        for (i, gi) in g.iter().enumerate() {
                            gb[i] += gi * adat[i];
                        }
                    }
                }
                Op::Square { a } => {
                    let g = node.grad.clone();
                    let input = &head[*a];
                    if input.requires {
                        let vals = input.data.clone();
                        accumulate(&mut head[*a].grad, &g, |i, gi| gi * 2.0 * vals[i]);
                    }
                }
                Op::Abs { a } => {
                    if head[*a].requires {
                        let g = node.grad.clone();
                        let vals = head[*a].data.clone();
                        accumulate(&mut head[*a].grad, &g, |i, gi| gi * vals[i].signum());
                    }
                }
                Op::Exp { a } => {
                    if head[*a].requires {
                        let g = node.grad.clone();
                        let out = node.data.clone();
                        accumulate(&mut head[*a].grad, &g, |i, gi| gi * out[i]);
                    }
                }
                Op::Log { a } => {
                    if head[*a].requires {
                        let g = node.grad.clone();
                        let vals = head[*a].data.clone();
                        accumulate(&mut head[*a].grad, &g, |i, gi| gi / vals[i]);
                    }
                }
                Op::GuardedLog { a, floor } => {
                    if head[*a].requires {
                        let g = node.grad.clone();
                        let floor = *floor;
                        let vals = head[*a].data.clone();
                        accumulate(&mut head[*a].grad, &g, |i, gi| {
                            if vals[i] > floor {
                                gi / vals[i]
                            } else {
                                0.0
                            }
                        });
                    }
                }
                Op::Sigmoid { a } => {
                    if head[*a].requires {
                        let g = node.grad.clone();
                        let out = node.data.clone();
                        accumulate(&mut head[*a].grad, &g, |i, gi| gi * out[i] * (1.0 - out[i]));
                    }
                }
                Op::Relu { a } => {
                    if head[*a].requires {
                        let g = node.grad.clone();
                        let vals = head[*a].data.clone();
                        accumulate(&mut head[*a].grad, &g, |i, gi| {
                            if vals[i] > 0.0 {
                                gi
                            } else {
                                0.0
                            }
                        });
                    }
                }
                Op::Scale { a, c } => {
                    if head[*a].requires {
                        let g = node.grad.clone();
                        let c = *c;
                        accumulate(&mut head[*a].grad, &g, |_, gi| gi * c);
                    }
                }
                Op::AddScalar { a } => {
                    if head[*a].requires {
                        let g = node.grad.clone();
                        accumulate(&mut head[*a].grad, &g, |_, gi| gi);
                    }
                }
                Op::Sum { a } => {
                    if head[*a].requires {
                        let g = node.grad[0];
                        for slot in head[*a].grad.iter_mut() {
                            *slot += g;
                        }
                    }
                }
                Op::Reshape { a } => {
                    if head[*a].requires {
                        let g = node.grad.clone();
                        accumulate(&mut head[*a].grad, &g, |_, gi| gi);
                    }
                }
                Op::StackRows { rows } => {
                    let g = node.grad.clone();
                    let width = node.shape[1];
                    let rows = rows.clone();
                    for (r, src) in rows.iter().enumerate() {
                        if head[*src].requires {
                            let slice = &g[r * width..(r + 1) * width];
                            for (slot, gi) in head[*src].grad.iter_mut().zip(slice) {
                                *slot += gi;
                            }
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                    if head[*logits].requires {
                        let g = node.grad[0];
                        let batch = labels.len();
                        let classes = probs.len() / batch;
                        let scale = g / batch as f64;
                        let probs = probs.clone();
                        let labels = labels.clone();
                        let gl = &mut head[*logits].grad;
                        for i in 0..batch {
                            for j in 0..classes {
                                let indicator = if j == labels[i] { 1.0 } else { 0.0 };
                                gl[i * classes + j] += scale * (probs[i * classes + j] - indicator);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("idx", &self.idx).finish()
    }
}

fn accumulate(dst: &mut [f64], g: &[f64], f: impl Fn(usize, f64) -> f64) {
    for (i, (slot, &gi)) in dst.iter_mut().zip(g).enumerate() {
        *slot += f(i, gi);
    }
}

impl<'t> Var<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.idx].shape.clone()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.idx].data.clone()
    }

    /// Value of a scalar node.
    pub fn scalar_value(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.idx];
        debug_assert!(node.shape.is_empty());
        node.data[0]
    }

    /// Accumulated gradient (zeros before [`Tape::backward`] has run).
    pub fn grad(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.idx].grad.clone()
    }

    fn same_tape(&self, rhs: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, rhs.tape),
            "vars must live on the same tape"
        );
    }

    fn binary(
        self,
        rhs: Var<'t>,
        name: &'static str,
        make: impl Fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        let (shape, data, requires) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx];
            let b = &inner.nodes[rhs.idx];
            if a.shape != b.shape {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let data: Vec<f64> = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), data, a.requires || b.requires)
        };
        self.tape
            .push_checked(name, shape, data, requires, make(self.idx, rhs.idx))
    }

    fn unary(
        self,
        name: &'static str,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var<'t>, TensorError> {
        let (shape, data, requires) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx];
            (
                a.shape.clone(),
                a.data.iter().map(|&x| f(x)).collect(),
                a.requires,
            )
        };
        self.tape.push_checked(name, shape, data, requires, op)
    }

    /// Matrix product of rank-2 tensors `[m x k] . [k x n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        let (shape, data, requires) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx];
            let b = &inner.nodes[rhs.idx];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a.data[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b.data[p * n..(p + 1) * n];
                    let crow = &mut data[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
            (vec![m, n], data, a.requires || b.requires)
        };
        self.tape.push_checked(
            "matmul",
            shape,
            data,
            requires,
            Op::MatMul {
                a: self.idx,
                b: rhs.idx,
            },
        )
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(rhs, "add", |a, b| Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(rhs, "sub", |a, b| Op::Sub { a, b }, |x, y| x - y)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(rhs, "mul", |a, b| Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn square(self) -> Result<Var<'t>, TensorError> {
        self.unary("square", Op::Square { a: self.idx }, |x| x * x)
    }

    pub fn abs(self) -> Result<Var<'t>, TensorError> {
        self.unary("abs", Op::Abs { a: self.idx }, f64::abs)
    }

    pub fn exp(self) -> Result<Var<'t>, TensorError> {
        self.unary("exp", Op::Exp { a: self.idx }, f64::exp)
    }

    /// Natural log; any non-positive entry is a domain error.
    pub fn log(self) -> Result<Var<'t>, TensorError> {
        {
            let inner = self.tape.inner.borrow();
            if let Some(&bad) = inner.nodes[self.idx].data.iter().find(|v| **v <= 0.0) {
                return Err(TensorError::LogDomain { value: bad });
            }
        }
        self.unary("log", Op::Log { a: self.idx }, f64::ln)
    }

    /// `log(max(x, floor))`: the clamp keeps `0 log 0` terms finite and has
    /// zero slope inside the clamped region.
    pub fn log_guarded(self, floor: f64) -> Result<Var<'t>, TensorError> {
        self.unary(
            "log_guarded",
            Op::GuardedLog {
                a: self.idx,
                floor,
            },
            move |x| x.max(floor).ln(),
        )
    }

    pub fn sigmoid(self) -> Result<Var<'t>, TensorError> {
        self.unary("sigmoid", Op::Sigmoid { a: self.idx }, sigmoid)
    }

    pub fn relu(self) -> Result<Var<'t>, TensorError> {
        self.unary("relu", Op::Relu { a: self.idx }, |x| x.max(0.0))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>, TensorError> {
        self.unary("scale", Op::Scale { a: self.idx, c }, move |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>, TensorError> {
        self.unary("add_scalar", Op::AddScalar { a: self.idx }, move |x| x + c)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Result<Var<'t>, TensorError> {
        let (data, requires) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx];
            (vec![a.data.iter().sum()], a.requires)
        };
        self.tape
            .push_checked("sum", vec![], data, requires, Op::Sum { a: self.idx })
    }

    /// Reinterprets the data under a new shape of equal length.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>, TensorError> {
        let (data, requires) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx];
            let numel: usize = shape.iter().product();
            if numel != a.data.len() {
                return Err(TensorError::ShapeLenMismatch {
                    shape,
                    len: a.data.len(),
                });
            }
            (a.data.clone(), a.requires)
        };
        self.tape
            .push_checked("reshape", shape, data, requires, Op::Reshape { a: self.idx })
    }
}
