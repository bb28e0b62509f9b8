//! Value-level math kernels shared by the recording and immediate engines.
//!
//! Keeping one implementation of each operation guarantees that training-time
//! and inference-time forward passes are bit-identical. All kernels panic on
//! shape violations; shape errors here are programming bugs, not user input.

use super::Tensor;

/// Decomposition of a shape around one axis: `outer * len * inner` elements,
/// where element `(o, i, j)` lives at offset `(o * len + i) * inner + j`.
#[derive(Clone, Copy, Debug)]
pub struct AxisLanes {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

pub fn axis_lanes(shape: &[usize], axis: usize) -> AxisLanes {
    assert!(
        axis < shape.len(),
        "axis {} out of range for shape {:?}",
        axis,
        shape
    );
    AxisLanes {
        outer: shape[..axis].iter().product(),
        len: shape[axis],
        inner: shape[axis + 1..].iter().product(),
    }
}

/// NumPy-style broadcast of two shapes; `None` if incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank, i);
        let db = dim_from_right(b, rank, i);
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], rank: usize, i: usize) -> usize {
    let pad = rank - shape.len();
    if i < pad {
        1
    } else {
        shape[i - pad]
    }
}

/// Row-major strides, with stride 0 on axes that broadcast (size 1 where the
/// output size is larger). `shape` is right-aligned against `out_shape`.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut natural = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        natural[i] = acc;
        acc *= shape[i];
    }
    let pad = rank - shape.len();
    (0..rank)
        .map(|i| {
            if i < pad {
                0
            } else if shape[i - pad] == 1 && out_shape[i] != 1 {
                0
            } else {
                natural[i - pad]
            }
        })
        .collect()
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape()).unwrap_or_else(|| {
        panic!(
            "shapes {:?} and {:?} do not broadcast",
            a.shape(),
            b.shape()
        )
    });
    let n: usize = out_shape.iter().product();
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; out_shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for slot in out.iter_mut() {
        *slot = f(ad[oa], bd[ob]);
        // odometer increment with stride bookkeeping
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    Tensor::new(out_shape, out)
}

/// Sum `g` down to `shape` (inverse of broadcasting for gradients).
pub fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut cur = g.clone();
    while cur.shape().len() > shape.len() {
        cur = sum_axis(&cur, 0, false);
    }
    for axis in 0..shape.len() {
        if shape[axis] == 1 && cur.shape()[axis] != 1 {
            cur = sum_axis(&cur, axis, true);
        }
    }
    assert_eq!(cur.shape(), shape, "gradient does not reduce to {:?}", shape);
    cur
}

pub fn map_unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

/// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
///
/// Leading (batch) dimensions must match exactly, or either operand may be
/// rank 2, in which case it is shared across the other's batches.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (ash, bsh) = (a.shape(), b.shape());
    assert!(
        ash.len() >= 2 && bsh.len() >= 2,
        "matmul needs rank >= 2, got {:?} x {:?}",
        ash,
        bsh
    );
    let (m, ka) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    assert_eq!(ka, kb, "matmul inner dims differ: {:?} x {:?}", ash, bsh);
    let k = ka;
    let a_lead = &ash[..ash.len() - 2];
    let b_lead = &bsh[..bsh.len() - 2];
    let (lead, a_shared, b_shared): (&[usize], bool, bool) = if a_lead == b_lead {
        (a_lead, false, false)
    } else if b_lead.is_empty() {
        (a_lead, false, true)
    } else if a_lead.is_empty() {
        (b_lead, true, false)
    } else {
        panic!("matmul batch dims differ: {:?} x {:?}", ash, bsh);
    };
    let batch: usize = lead.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ao = if a_shared { 0 } else { bi * m * k };
        let bo = if b_shared { 0 } else { bi * k * n };
        let co = bi * m * n;
        for i in 0..m {
            let arow = &ad[ao + i * k..ao + (i + 1) * k];
            let crow = &mut out[co + i * n..co + (i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &bd[bo + kk * n..bo + (kk + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        }
    }
    let mut out_shape = lead.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Tensor::new(out_shape, out)
}

/// Swap the last two axes.
pub fn transpose_last(a: &Tensor) -> Tensor {
    let sh = a.shape();
    assert!(sh.len() >= 2, "transpose needs rank >= 2, got {:?}", sh);
    let (m, n) = (sh[sh.len() - 2], sh[sh.len() - 1]);
    let batch: usize = sh[..sh.len() - 2].iter().product();
    let d = a.data();
    let mut out = vec![0.0; a.numel()];
    for bi in 0..batch {
        let base = bi * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = d[base + i * n + j];
            }
        }
    }
    let mut out_shape = sh.to_vec();
    let r = out_shape.len();
    out_shape.swap(r - 2, r - 1);
    Tensor::new(out_shape, out)
}

/// Numerically stable softmax along one axis.
pub fn softmax_axis(a: &Tensor, axis: usize) -> Tensor {
    let l = axis_lanes(a.shape(), axis);
    let d = a.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..l.outer {
        for j in 0..l.inner {
            let base = o * l.len * l.inner + j;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..l.len {
                mx = mx.max(d[base + i * l.inner]);
            }
            let mut s = 0.0;
            for i in 0..l.len {
                let e = (d[base + i * l.inner] - mx).exp();
                out[base + i * l.inner] = e;
                s += e;
            }
            let inv = 1.0 / s;
            for i in 0..l.len {
                out[base + i * l.inner] *= inv;
            }
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Backward of softmax given its output `y` and upstream gradient `dy`.
pub fn softmax_axis_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    assert_eq!(y.shape(), dy.shape());
    let l = axis_lanes(y.shape(), axis);
    let (yd, gd) = (y.data(), dy.data());
    let mut out = vec![0.0; yd.len()];
    for o in 0..l.outer {
        for j in 0..l.inner {
            let base = o * l.len * l.inner + j;
            let mut dot = 0.0;
            for i in 0..l.len {
                dot += yd[base + i * l.inner] * gd[base + i * l.inner];
            }
            for i in 0..l.len {
                let off = base + i * l.inner;
                out[off] = yd[off] * (gd[off] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

pub fn sum_all(a: &Tensor) -> f64 {
    a.data().iter().sum()
}

/// Sum along one axis. With `keepdim` the axis stays with size 1.
pub fn sum_axis(a: &Tensor, axis: usize, keepdim: bool) -> Tensor {
    let l = axis_lanes(a.shape(), axis);
    let d = a.data();
    let mut out = vec![0.0; l.outer * l.inner];
    for o in 0..l.outer {
        for i in 0..l.len {
            let base = (o * l.len + i) * l.inner;
            let orow = &mut out[o * l.inner..(o + 1) * l.inner];
            for (acc, &v) in orow.iter_mut().zip(&d[base..base + l.inner]) {
                *acc += v;
            }
        }
    }
    let mut out_shape = a.shape().to_vec();
    if keepdim {
        out_shape[axis] = 1;
    } else {
        out_shape.remove(axis);
    }
    Tensor::new(out_shape, out)
}

/// Broadcast a reduced-axis gradient back over the axis (inverse of `sum_axis`).
pub fn repeat_axis(g: &Tensor, in_shape: &[usize], axis: usize) -> Tensor {
    let l = axis_lanes(in_shape, axis);
    assert_eq!(g.numel(), l.outer * l.inner, "repeat_axis size mismatch");
    let gd = g.data();
    let mut out = vec![0.0; l.outer * l.len * l.inner];
    for o in 0..l.outer {
        let grow = &gd[o * l.inner..(o + 1) * l.inner];
        for i in 0..l.len {
            let base = (o * l.len + i) * l.inner;
            out[base..base + l.inner].copy_from_slice(grow);
        }
    }
    Tensor::new(in_shape.to_vec(), out)
}

/// Contiguous sub-range `[start, start + len)` along one axis.
pub fn slice(a: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let l = axis_lanes(a.shape(), axis);
    assert!(
        start + len <= l.len,
        "slice [{}, {}) out of range on axis {} (size {})",
        start,
        start + len,
        axis,
        l.len
    );
    let d = a.data();
    let mut out = vec![0.0; l.outer * len * l.inner];
    for o in 0..l.outer {
        let src = (o * l.len + start) * l.inner;
        let dst = o * len * l.inner;
        out[dst..dst + len * l.inner].copy_from_slice(&d[src..src + len * l.inner]);
    }
    let mut out_shape = a.shape().to_vec();
    out_shape[axis] = len;
    Tensor::new(out_shape, out)
}

/// Scatter a slice gradient back into a zero tensor of the input shape.
pub fn slice_grad(dy: &Tensor, in_shape: &[usize], axis: usize, start: usize) -> Tensor {
    let l = axis_lanes(in_shape, axis);
    let len = dy.shape()[axis];
    let gd = dy.data();
    let mut out = vec![0.0; in_shape.iter().product()];
    for o in 0..l.outer {
        let dst = (o * l.len + start) * l.inner;
        let src = o * len * l.inner;
        out[dst..dst + len * l.inner].copy_from_slice(&gd[src..src + len * l.inner]);
    }
    Tensor::new(in_shape.to_vec(), out)
}

/// Concatenate along one axis; all other dims must match.
pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let first = parts[0].shape();
    let mut total = 0;
    for p in parts {
        let sh = p.shape();
        assert_eq!(sh.len(), first.len(), "concat rank mismatch");
        for (d, (&a, &b)) in sh.iter().zip(first).enumerate() {
            assert!(
                d == axis || a == b,
                "concat shape mismatch off-axis: {:?} vs {:?}",
                sh,
                first
            );
        }
        total += sh[axis];
    }
    let mut out_shape = first.to_vec();
    out_shape[axis] = total;
    let l = axis_lanes(&out_shape, axis);
    let mut out = vec![0.0; l.outer * l.len * l.inner];
    let mut at = 0;
    for p in parts {
        let plen = p.shape()[axis];
        let pd = p.data();
        for o in 0..l.outer {
            let src = o * plen * l.inner;
            let dst = (o * l.len + at) * l.inner;
            out[dst..dst + plen * l.inner].copy_from_slice(&pd[src..src + plen * l.inner]);
        }
        at += plen;
    }
    Tensor::new(out_shape, out)
}

/// In-place `a += b` for gradient accumulation (same shape).
pub fn accumulate(a: &mut Tensor, b: &Tensor) {
    assert_eq!(a.shape(), b.shape(), "accumulate shape mismatch");
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}
