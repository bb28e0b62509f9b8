//! Finite-difference gradient checking.
//!
//! Central differences with step `h = 1e-5`, compared by relative error with
//! an absolute floor so near-zero gradients do not blow up the ratio. Used by
//! the test suite to validate every differentiable op and the full model
//! pipeline against a numerical oracle.

use super::tape::{Tape, Var};
use super::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-3)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Largest relative error between analytic and central-difference gradients
/// of a scalar-valued function over all elements of all inputs.
pub fn max_grad_error(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        let root = f(&mut tape, &vars);
        tape.value_ref(root).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars);
    let grads = tape.backward(root);

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i], input.shape());
        for e in 0..input.numel() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[i].data_mut()[e] += FD_STEP;
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[i].data_mut()[e] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[e], fd));
        }
    }
    worst
}

/// Panic if any analytic gradient disagrees with the numerical oracle by more
/// than `tol` relative error.
pub fn assert_grads_close(inputs: &[Tensor], tol: f64, f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let err = max_grad_error(inputs, f);
    assert!(
        err < tol,
        "gradient check failed: max relative error {:.3e} >= tolerance {:.1e}",
        err,
        tol
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::engine::{gru_step, layer_norm, linear, normalize_rows, Dense, GruCell};
    use crate::tensor::Engine;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const OP_TOL: f64 = 1e-4;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Uniform in [0.5, 1.5]: keeps ln/sqrt/div away from singularities.
    fn rand_pos(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(0.5..1.5))
    }

    #[test]
    fn grads_elementwise_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = randn(&mut rng, &[3, 4]);
        let b = rand_pos(&mut rng, &[3, 4]);
        assert_grads_close(&[a.clone(), b.clone()], OP_TOL, |t, v| {
            let s = t.add(&v[0], &v[1]);
            let m = t.mul(&s, &v[0]);
            let d = t.div(&m, &v[1]);
            let u = t.sub(&d, &v[0]);
            t.sum_all(&u)
        });
    }

    #[test]
    fn grads_broadcast_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = randn(&mut rng, &[2, 3, 4]);
        let row = rand_pos(&mut rng, &[4]);
        let col = randn(&mut rng, &[3, 1]);
        assert_grads_close(&[x, row, col], OP_TOL, |t, v| {
            let a = t.add(&v[0], &v[1]);
            let b = t.mul(&a, &v[2]);
            let c = t.div(&b, &v[1]);
            t.sum_all(&c)
        });
    }

    #[test]
    fn grads_unary_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = rand_pos(&mut rng, &[2, 5]);
        assert_grads_close(&[x], OP_TOL, |t, v| {
            let a = t.ln(&v[0]);
            let b = t.tanh(&a);
            let c = t.exp(&b);
            let d = t.sigmoid(&c);
            let e = t.sqrt(&d);
            t.sum_all(&e)
        });
    }

    #[test]
    fn grads_relu_and_clamp_off_kink() {
        // inputs shifted to keep |x| and |x - 0.2| well above the FD step
        let x = Tensor::new(vec![6], vec![-0.9, -0.4, 0.3, 0.7, 1.2, -1.5]);
        assert_grads_close(&[x], OP_TOL, |t, v| {
            let r = t.relu(&v[0]);
            let c = t.clamp_min(&v[0], 0.2);
            let s = t.add(&r, &c);
            t.sum_all(&s)
        });
    }

    #[test]
    fn grads_matmul_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 2]);
        assert_grads_close(&[a, b], OP_TOL, |t, v| {
            let c = t.matmul(&v[0], &v[1]);
            let c = t.tanh(&c);
            t.sum_all(&c)
        });
    }

    #[test]
    fn grads_batched_matmul_with_shared_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x = randn(&mut rng, &[2, 3, 4]);
        let w = randn(&mut rng, &[4, 3]);
        assert_grads_close(&[x, w], OP_TOL, |t, v| {
            let y = t.matmul(&v[0], &v[1]);
            let y = t.sigmoid(&y);
            t.sum_all(&y)
        });
    }

    #[test]
    fn grads_softmax_weighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let x = randn(&mut rng, &[3, 5]);
        let w = randn(&mut rng, &[3, 5]);
        assert_grads_close(&[x, w], OP_TOL, |t, v| {
            let y = t.softmax(&v[0], 1);
            let p = t.mul(&y, &v[1]);
            t.sum_all(&p)
        });
    }

    #[test]
    fn grads_softmax_middle_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let x = randn(&mut rng, &[2, 4, 3]);
        let w = randn(&mut rng, &[2, 4, 3]);
        assert_grads_close(&[x, w], OP_TOL, |t, v| {
            let y = t.softmax(&v[0], 1);
            let p = t.mul(&y, &v[1]);
            t.sum_all(&p)
        });
    }

    #[test]
    fn grads_reductions_and_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let x = randn(&mut rng, &[2, 3, 4]);
        assert_grads_close(&[x], OP_TOL, |t, v| {
            let s = t.sum_axis(&v[0], 1, true);
            let m = t.mean_axis(&v[0], 2, false);
            let s2 = t.square(&s);
            let a = t.sum_all(&s2);
            let m2 = t.square(&m);
            let b = t.sum_all(&m2);
            t.add(&a, &b)
        });
    }

    #[test]
    fn grads_slice_concat_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = randn(&mut rng, &[4, 3]);
        assert_grads_close(&[x], OP_TOL, |t, v| {
            let top = t.slice(&v[0], 0, 0, 2);
            let bottom = t.slice(&v[0], 0, 2, 2);
            let tt = t.transpose_last(&top);
            let prod = t.matmul(&tt, &bottom);
            let stacked = t.concat(&[prod.clone(), prod], 1);
            let sq = t.square(&stacked);
            t.sum_all(&sq)
        });
    }

    #[test]
    fn grads_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = randn(&mut rng, &[3, 6]);
        let gamma = rand_pos(&mut rng, &[6]);
        let beta = randn(&mut rng, &[6]);
        let probe = randn(&mut rng, &[3, 6]);
        assert_grads_close(&[x, gamma, beta, probe.clone()], OP_TOL, |t, v| {
            let y = layer_norm(t, &v[0], &v[1], &v[2], 1e-5);
            let p = t.mul(&y, &v[3]);
            t.sum_all(&p)
        });
    }

    #[test]
    fn grads_linear_and_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = randn(&mut rng, &[4, 3]);
        let w = randn(&mut rng, &[3, 5]);
        let b = randn(&mut rng, &[5]);
        let probe = randn(&mut rng, &[4, 5]);
        assert_grads_close(&[x, w, b, probe.clone()], OP_TOL, |t, v| {
            let d = Dense {
                w: v[1].clone(),
                b: v[2].clone(),
            };
            let y = linear(t, &v[0], &d);
            let n = normalize_rows(t, &y, 1e-8);
            let p = t.mul(&n, &v[3]);
            t.sum_all(&p)
        });
    }

    #[test]
    fn grads_gru_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let shapes: Vec<Vec<usize>> = vec![
            vec![2, 3], // x
            vec![2, 4], // h
            vec![3, 4],
            vec![3, 4],
            vec![3, 4], // w_i*
            vec![4, 4],
            vec![4, 4],
            vec![4, 4], // w_h*
            vec![4],
            vec![4],
            vec![4], // b_i*
            vec![4],
            vec![4],
            vec![4], // b_h*
        ];
        let inputs: Vec<Tensor> = shapes.iter().map(|s| randn(&mut rng, s)).collect();
        assert_grads_close(&inputs, OP_TOL, |t, v| {
            let cell = GruCell {
                w_ir: v[2].clone(),
                w_iz: v[3].clone(),
                w_in: v[4].clone(),
                w_hr: v[5].clone(),
                w_hz: v[6].clone(),
                w_hn: v[7].clone(),
                b_ir: v[8].clone(),
                b_iz: v[9].clone(),
                b_in: v[10].clone(),
                b_hr: v[11].clone(),
                b_hz: v[12].clone(),
                b_hn: v[13].clone(),
            };
            let h2 = gru_step(t, &cell, &v[0], &v[1]);
            let sq = t.square(&h2);
            t.sum_all(&sq)
        });
    }

    #[test]
    fn rel_err_uses_absolute_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-6, 2e-6) - 1e-6 / 1e-3).abs() < 1e-12);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
