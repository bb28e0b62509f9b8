//! Immediate engine: computes values directly with no graph and no gradient
//! bookkeeping. Used for inference and evaluation; shares every kernel with
//! the tape so results match training-time forward passes bit for bit.

use std::rc::Rc;

use super::engine::{CustomOp, Engine};
use super::kernels as k;
use super::tape::UnaryKind;
use super::Tensor;

/// Non-recording engine; handles are plain tensors.
#[derive(Default, Clone, Copy)]
pub struct Eval;

impl Eval {
    fn unary(&self, a: &Tensor, kind: UnaryKind) -> Tensor {
        k::map_unary(a, |x| kind.apply(x))
    }
}

impl Engine for Eval {
    type T = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn value(&self, x: &Tensor) -> Tensor {
        x.clone()
    }

    fn shape(&self, x: &Tensor) -> Vec<usize> {
        x.shape().to_vec()
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        k::broadcast_binary(a, b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        k::broadcast_binary(a, b, |x, y| x - y)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        k::broadcast_binary(a, b, |x, y| x * y)
    }

    fn div(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        k::broadcast_binary(a, b, |x, y| x / y)
    }

    fn affine(&mut self, a: &Tensor, mul: f64, add: f64) -> Tensor {
        k::map_unary(a, |x| x * mul + add)
    }

    fn exp(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Exp)
    }

    fn ln(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Ln)
    }

    fn sqrt(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Sqrt)
    }

    fn tanh(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Tanh)
    }

    fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Sigmoid)
    }

    fn relu(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Relu)
    }

    fn clamp_min(&mut self, a: &Tensor, min: f64) -> Tensor {
        k::map_unary(a, |x| x.max(min))
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        k::matmul(a, b)
    }

    fn transpose_last(&mut self, a: &Tensor) -> Tensor {
        k::transpose_last(a)
    }

    fn softmax(&mut self, a: &Tensor, axis: usize) -> Tensor {
        k::softmax_axis(a, axis)
    }

    fn sum_all(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(k::sum_all(a))
    }

    fn sum_axis(&mut self, a: &Tensor, axis: usize, keepdim: bool) -> Tensor {
        k::sum_axis(a, axis, keepdim)
    }

    fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Tensor {
        a.reshaped(shape)
    }

    fn slice(&mut self, a: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
        k::slice(a, axis, start, len)
    }

    fn concat(&mut self, parts: &[Tensor], axis: usize) -> Tensor {
        let refs: Vec<&Tensor> = parts.iter().collect();
        k::concat(&refs, axis)
    }

    fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[Tensor]) -> Tensor {
        let refs: Vec<&Tensor> = inputs.iter().collect();
        op.forward(&refs)
    }
}
