//! Recording engine: builds a computation graph and runs reverse-mode
//! differentiation over it.
//!
//! A [`Tape`] owns a flat list of nodes; [`Var`] is an index into that list.
//! Ops only ever reference earlier nodes, so walking the list backwards is a
//! valid topological order for the backward pass. Tapes are cheap to build and
//! are discarded after every optimization step.

use std::rc::Rc;

use super::engine::{CustomOp, Engine};
use super::kernels as k;
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
pub(crate) enum UnaryKind {
    Exp,
    Ln,
    Sqrt,
    Tanh,
    Sigmoid,
    Relu,
}

impl UnaryKind {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Exp => x.exp(),
            UnaryKind::Ln => x.ln(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            UnaryKind::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    /// Local derivative, given input `x` and output `y`.
    fn slope(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Exp => y,
            UnaryKind::Ln => 1.0 / x,
            UnaryKind::Sqrt => 0.5 / y,
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Matmul(Var, Var),
    Unary(Var, UnaryKind),
    Affine { a: Var, mul: f64 },
    ClampMin { a: Var, min: f64 },
    Softmax { a: Var, axis: usize },
    SumAll(Var),
    SumAxis { a: Var, axis: usize },
    Reshape(Var),
    TransposeLast(Var),
    Slice { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Custom { inputs: Vec<Var>, op: Rc<dyn CustomOp> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`]. Only leaf nodes (parameters and
/// constants marked as differentiable) retain their gradients; intermediate
/// buffers are dropped as soon as they have been consumed.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros if no gradient flowed to it.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// Graph-recording autodiff engine.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Borrow a node's value without cloning.
    pub fn value_ref(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, kind: UnaryKind) -> Var {
        let value = k::map_unary(&self.nodes[a.0].value, |x| kind.apply(x));
        let req = self.requires(a);
        self.push(Op::Unary(a, kind), value, req)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = k::broadcast_binary(&self.nodes[a.0].value, &self.nodes[b.0].value, f);
        let req = self.requires(a) || self.requires(b);
        self.push(op, value, req)
    }

    /// Reverse-mode sweep from a scalar root. Returns gradients for leaves.
    pub fn backward(&self, root: Var) -> Gradients {
        let root_node = &self.nodes[root.0];
        assert_eq!(
            root_node.value.numel(),
            1,
            "backward root must be a scalar, got shape {:?}",
            root_node.value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize(self.nodes.len(), None);
        grads[root.0] = Some(Tensor::full(root_node.value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].clone().expect("gradient present");
            self.propagate(i, &g, &mut grads);
            if !matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = None; // free intermediate gradients eagerly
            }
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_reduced(*a, g, grads);
                self.accumulate_reduced(*b, g, grads);
            }
            Op::Sub(a, b) => {
                self.accumulate_reduced(*a, g, grads);
                let neg = k::map_unary(g, |x| -x);
                self.accumulate_reduced(*b, &neg, grads);
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let da = k::broadcast_binary(g, &self.nodes[b.0].value, |gv, bv| gv * bv);
                    self.accumulate_reduced(*a, &da, grads);
                }
                if self.requires(*b) {
                    let db = k::broadcast_binary(g, &self.nodes[a.0].value, |gv, av| gv * av);
                    self.accumulate_reduced(*b, &db, grads);
                }
            }
            Op::Div(a, b) => {
                if self.requires(*a) {
                    let da = k::broadcast_binary(g, &self.nodes[b.0].value, |gv, bv| gv / bv);
                    self.accumulate_reduced(*a, &da, grads);
                }
                if self.requires(*b) {
                    let ratio = k::broadcast_binary(
                        &self.nodes[a.0].value,
                        &self.nodes[b.0].value,
                        |av, bv| -av / (bv * bv),
                    );
                    let db = k::broadcast_binary(g, &ratio, |gv, rv| gv * rv);
                    self.accumulate_reduced(*b, &db, grads);
                }
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.requires(*a) {
                    let da = k::matmul(g, &k::transpose_last(bv));
                    self.accumulate_reduced(*a, &da, grads);
                }
                if self.requires(*b) {
                    let db = k::matmul(&k::transpose_last(av), g);
                    self.accumulate_reduced(*b, &db, grads);
                }
            }
            Op::Unary(a, kind) => {
                let (x, y) = (&self.nodes[a.0].value, &node.value);
                let mut dx = g.clone();
                for ((d, &xv), &yv) in dx.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *d *= kind.slope(xv, yv);
                }
                self.accumulate(*a, dx, grads);
            }
            Op::Affine { a, mul } => {
                let dx = k::map_unary(g, |x| x * mul);
                self.accumulate(*a, dx, grads);
            }
            Op::ClampMin { a, min } => {
                let x = &self.nodes[a.0].value;
                let mut dx = g.clone();
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    if xv < *min {
                        *d = 0.0;
                    }
                }
                self.accumulate(*a, dx, grads);
            }
            Op::Softmax { a, axis } => {
                let dx = k::softmax_axis_backward(&node.value, g, *axis);
                self.accumulate(*a, dx, grads);
            }
            Op::SumAll(a) => {
                let shape = self.nodes[a.0].value.shape();
                let dx = Tensor::full(shape, g.item());
                self.accumulate(*a, dx, grads);
            }
            Op::SumAxis { a, axis } => {
                let shape = self.nodes[a.0].value.shape();
                let dx = k::repeat_axis(g, shape, *axis);
                self.accumulate(*a, dx, grads);
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accumulate(*a, g.reshaped(&shape), grads);
            }
            Op::TransposeLast(a) => {
                self.accumulate(*a, k::transpose_last(g), grads);
            }
            Op::Slice { a, axis, start } => {
                let shape = self.nodes[a.0].value.shape();
                let dx = k::slice_grad(g, shape, *axis, *start);
                self.accumulate(*a, dx, grads);
            }
            Op::Concat { parts, axis } => {
                let mut at = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if self.requires(*p) {
                        let dp = k::slice(g, *axis, at, len);
                        self.accumulate(*p, dp, grads);
                    }
                    at += len;
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let input_grads = op.backward(&values, &node.value, g);
                assert_eq!(
                    input_grads.len(),
                    inputs.len(),
                    "custom op '{}' returned {} gradients for {} inputs",
                    op.name(),
                    input_grads.len(),
                    inputs.len()
                );
                for (v, dg) in inputs.iter().zip(input_grads) {
                    if let Some(dg) = dg {
                        self.accumulate(*v, dg, grads);
                    }
                }
            }
        }
    }

    /// Accumulate `g` into the gradient of `v`, reducing over broadcast axes.
    fn accumulate_reduced(&self, v: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        if !self.requires(v) {
            return;
        }
        let reduced = k::reduce_to_shape(g, self.nodes[v.0].value.shape());
        self.accumulate(v, reduced, grads);
    }

    fn accumulate(&self, v: Var, g: Tensor, grads: &mut [Option<Tensor>]) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => k::accumulate(existing, &g),
            slot @ None => *slot = Some(g),
        }
    }
}

impl Engine for Tape {
    type T = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    fn value(&self, x: &Var) -> Tensor {
        self.nodes[x.0].value.clone()
    }

    fn shape(&self, x: &Var) -> Vec<usize> {
        self.nodes[x.0].value.shape().to_vec()
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, |x, y| x + y, Op::Add(*a, *b))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, |x, y| x - y, Op::Sub(*a, *b))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, |x, y| x * y, Op::Mul(*a, *b))
    }

    fn div(&mut self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, |x, y| x / y, Op::Div(*a, *b))
    }

    fn affine(&mut self, a: &Var, mul: f64, add: f64) -> Var {
        let value = k::map_unary(&self.nodes[a.0].value, |x| x * mul + add);
        let req = self.requires(*a);
        self.push(Op::Affine { a: *a, mul }, value, req)
    }

    fn exp(&mut self, a: &Var) -> Var {
        self.unary(*a, UnaryKind::Exp)
    }

    fn ln(&mut self, a: &Var) -> Var {
        self.unary(*a, UnaryKind::Ln)
    }

    fn sqrt(&mut self, a: &Var) -> Var {
        self.unary(*a, UnaryKind::Sqrt)
    }

    fn tanh(&mut self, a: &Var) -> Var {
        self.unary(*a, UnaryKind::Tanh)
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        self.unary(*a, UnaryKind::Sigmoid)
    }

    fn relu(&mut self, a: &Var) -> Var {
        self.unary(*a, UnaryKind::Relu)
    }

    fn clamp_min(&mut self, a: &Var, min: f64) -> Var {
        let value = k::map_unary(&self.nodes[a.0].value, |x| x.max(min));
        let req = self.requires(*a);
        self.push(Op::ClampMin { a: *a, min }, value, req)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let value = k::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let req = self.requires(*a) || self.requires(*b);
        self.push(Op::Matmul(*a, *b), value, req)
    }

    fn transpose_last(&mut self, a: &Var) -> Var {
        let value = k::transpose_last(&self.nodes[a.0].value);
        let req = self.requires(*a);
        self.push(Op::TransposeLast(*a), value, req)
    }

    fn softmax(&mut self, a: &Var, axis: usize) -> Var {
        let value = k::softmax_axis(&self.nodes[a.0].value, axis);
        let req = self.requires(*a);
        self.push(Op::Softmax { a: *a, axis }, value, req)
    }

    fn sum_all(&mut self, a: &Var) -> Var {
        let value = Tensor::scalar(k::sum_all(&self.nodes[a.0].value));
        let req = self.requires(*a);
        self.push(Op::SumAll(*a), value, req)
    }

    fn sum_axis(&mut self, a: &Var, axis: usize, keepdim: bool) -> Var {
        let value = k::sum_axis(&self.nodes[a.0].value, axis, keepdim);
        let req = self.requires(*a);
        self.push(Op::SumAxis { a: *a, axis }, value, req)
    }

    fn reshape(&mut self, a: &Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0].value.reshaped(shape);
        let req = self.requires(*a);
        self.push(Op::Reshape(*a), value, req)
    }

    fn slice(&mut self, a: &Var, axis: usize, start: usize, len: usize) -> Var {
        let value = k::slice(&self.nodes[a.0].value, axis, start, len);
        let req = self.requires(*a);
        self.push(Op::Slice { a: *a, axis, start }, value, req)
    }

    fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = k::concat(&values, axis);
        let req = parts.iter().any(|v| self.requires(*v));
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            value,
            req,
        )
    }

    fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[Var]) -> Var {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = op.forward(&values);
        let req = inputs.iter().any(|v| self.requires(*v));
        self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            value,
            req,
        )
    }
}
