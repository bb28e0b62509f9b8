//! The [`Engine`] trait: a single forward-pass vocabulary implemented by both
//! the recording tape and the immediate evaluator, plus composite building
//! blocks (linear, layer norm, GRU cell) written once against the trait.

use std::rc::Rc;

use super::Tensor;

/// Differentiable operation with a hand-written backward pass.
///
/// Used where graph composition would be wasteful (e.g. large sliding-window
/// reductions): the forward produces a value, the backward maps the upstream
/// gradient straight to input gradients.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;
    /// One gradient per input; `None` marks an input that needs no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

/// Forward-pass operations over an opaque tensor handle.
///
/// `Tape` records every call for differentiation; `Eval` computes immediately.
/// Model code is generic over `Engine`, so the two paths share one
/// implementation and produce bit-identical values.
pub trait Engine {
    type T: Clone;

    /// Introduce a value that needs no gradient.
    fn constant(&mut self, t: Tensor) -> Self::T;
    /// Materialize the current value of a handle.
    fn value(&self, x: &Self::T) -> Tensor;
    fn shape(&self, x: &Self::T) -> Vec<usize>;

    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn div(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    /// `x * mul + add` elementwise.
    fn affine(&mut self, a: &Self::T, mul: f64, add: f64) -> Self::T;

    fn exp(&mut self, a: &Self::T) -> Self::T;
    fn ln(&mut self, a: &Self::T) -> Self::T;
    fn sqrt(&mut self, a: &Self::T) -> Self::T;
    fn tanh(&mut self, a: &Self::T) -> Self::T;
    fn sigmoid(&mut self, a: &Self::T) -> Self::T;
    fn relu(&mut self, a: &Self::T) -> Self::T;
    fn clamp_min(&mut self, a: &Self::T, min: f64) -> Self::T;

    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn transpose_last(&mut self, a: &Self::T) -> Self::T;
    fn softmax(&mut self, a: &Self::T, axis: usize) -> Self::T;

    fn sum_all(&mut self, a: &Self::T) -> Self::T;
    fn sum_axis(&mut self, a: &Self::T, axis: usize, keepdim: bool) -> Self::T;
    fn reshape(&mut self, a: &Self::T, shape: &[usize]) -> Self::T;
    fn slice(&mut self, a: &Self::T, axis: usize, start: usize, len: usize) -> Self::T;
    fn concat(&mut self, parts: &[Self::T], axis: usize) -> Self::T;
    fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[Self::T]) -> Self::T;

    // --- derived conveniences -------------------------------------------

    fn neg(&mut self, a: &Self::T) -> Self::T {
        self.affine(a, -1.0, 0.0)
    }

    fn square(&mut self, a: &Self::T) -> Self::T {
        self.mul(a, a)
    }

    fn mean_all(&mut self, a: &Self::T) -> Self::T {
        let n: usize = self.shape(a).iter().product();
        let s = self.sum_all(a);
        self.affine(&s, 1.0 / n as f64, 0.0)
    }

    fn mean_axis(&mut self, a: &Self::T, axis: usize, keepdim: bool) -> Self::T {
        let n = self.shape(a)[axis];
        let s = self.sum_axis(a, axis, keepdim);
        self.affine(&s, 1.0 / n as f64, 0.0)
    }
}

/// Parameters of an affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub w: T,
    pub b: T,
}

/// `x W + b` with `x: [.., in]`, `w: [in, out]`, `b: [out]`.
pub fn linear<E: Engine>(eng: &mut E, x: &E::T, d: &Dense<E::T>) -> E::T {
    let y = eng.matmul(x, &d.w);
    eng.add(&y, &d.b)
}

/// Layer normalization over the last axis with learned scale and shift.
pub fn layer_norm<E: Engine>(eng: &mut E, x: &E::T, gamma: &E::T, beta: &E::T, eps: f64) -> E::T {
    let rank = eng.shape(x).len();
    let mu = eng.mean_axis(x, rank - 1, true);
    let centered = eng.sub(x, &mu);
    let sq = eng.square(&centered);
    let var = eng.mean_axis(&sq, rank - 1, true);
    let var_eps = eng.affine(&var, 1.0, eps);
    let std = eng.sqrt(&var_eps);
    let normed = eng.div(&centered, &std);
    let scaled = eng.mul(&normed, gamma);
    eng.add(&scaled, beta)
}

/// Weights of a gated recurrent unit cell.
#[derive(Clone, Debug)]
pub struct GruCell<T> {
    /// Input-to-hidden weights for reset, update, candidate: each `[in, hidden]`.
    pub w_ir: T,
    pub w_iz: T,
    pub w_in: T,
    /// Hidden-to-hidden weights: each `[hidden, hidden]`.
    pub w_hr: T,
    pub w_hz: T,
    pub w_hn: T,
    /// Input-side biases: each `[hidden]`.
    pub b_ir: T,
    pub b_iz: T,
    pub b_in: T,
    /// Hidden-side biases: each `[hidden]`.
    pub b_hr: T,
    pub b_hz: T,
    pub b_hn: T,
}

/// One GRU step: `x: [.., in]`, `h: [.., hidden]` -> new hidden `[.., hidden]`.
///
/// Gate convention: `r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)`, same for `z`;
/// candidate `n = tanh(x W_in + b_in + r * (h W_hn + b_hn))`;
/// output `h' = z * h + (1 - z) * n`.
pub fn gru_step<E: Engine>(eng: &mut E, cell: &GruCell<E::T>, x: &E::T, h: &E::T) -> E::T {
    let gate = |eng: &mut E, wi: &E::T, bi: &E::T, wh: &E::T, bh: &E::T| {
        let xi = eng.matmul(x, wi);
        let xi = eng.add(&xi, bi);
        let hh = eng.matmul(h, wh);
        let hh = eng.add(&hh, bh);
        eng.add(&xi, &hh)
    };
    let r_pre = gate(eng, &cell.w_ir, &cell.b_ir, &cell.w_hr, &cell.b_hr);
    let r = eng.sigmoid(&r_pre);
    let z_pre = gate(eng, &cell.w_iz, &cell.b_iz, &cell.w_hz, &cell.b_hz);
    let z = eng.sigmoid(&z_pre);
    let xn = eng.matmul(x, &cell.w_in);
    let xn = eng.add(&xn, &cell.b_in);
    let hn = eng.matmul(h, &cell.w_hn);
    let hn = eng.add(&hn, &cell.b_hn);
    let gated = eng.mul(&r, &hn);
    let n_pre = eng.add(&xn, &gated);
    let n = eng.tanh(&n_pre);
    let zh = eng.mul(&z, h);
    let one_minus_z = eng.affine(&z, -1.0, 1.0);
    let zn = eng.mul(&one_minus_z, &n);
    eng.add(&zh, &zn)
}

/// Normalize each row (last axis) to unit length, clamping the norm at `eps`.
///
/// The clamp is applied to the squared norm (at `eps^2`) before the square
/// root; since the square root is monotone this equals clamping the norm at
/// `eps`, but keeps the root's derivative finite for all-zero rows.
pub fn normalize_rows<E: Engine>(eng: &mut E, x: &E::T, eps: f64) -> E::T {
    let rank = eng.shape(x).len();
    let sq = eng.square(x);
    let sumsq = eng.sum_axis(&sq, rank - 1, true);
    let clamped = eng.clamp_min(&sumsq, eps * eps);
    let norm = eng.sqrt(&clamped);
    eng.div(x, &norm)
}

/// Stack handles along a fresh leading axis.
pub fn stack<E: Engine>(eng: &mut E, parts: &[E::T]) -> E::T {
    assert!(!parts.is_empty(), "stack of zero tensors");
    let with_axis: Vec<E::T> = parts
        .iter()
        .map(|p| {
            let mut shape = vec![1];
            shape.extend(eng.shape(p));
            eng.reshape(p, &shape)
        })
        .collect();
    eng.concat(&with_axis, 0)
}
