use proptest::prelude::*;

use super::*;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

fn t64(dims: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(dims, data).unwrap()
}

fn random(dims: &[usize], seed: u64) -> Tensor<f64> {
    SeededRng::new(seed).normal_tensor(dims)
}

/// Reduce `y` to a scalar with fixed random weights so no coordinate's
/// gradient cancels by symmetry.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = random(tape.dims(y), seed);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(name: &str, x: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) {
    let err = grad_check(|t, v| {
        let y = f(t, v)?;
        weighted_sum(t, y, 99)
    }, x, 1e-5)
    .unwrap();
    assert!(err <= 1e-6, "{name}: relative gradient error {err:e}");
}

#[test]
fn matmul_identity() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = t.constant(t64(&[2, 1], &[3.0, 4.0]));
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).dims(), &[2, 1]);
    assert_eq!(t.value(c).data(), &[3.0, 4.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(t64(&[2], &[0.0, 0.0]));
    let y = t.softmax(x);
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn layer_norm_of_two_values() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(t64(&[2], &[2.0, 4.0]));
    let y = t.layer_norm(x, 1e-5);
    // Direct evaluation: mu = 3, var = 1, (x - mu) / sqrt(1 + 1e-5).
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    let got = t.value(y).data();
    assert!((got[0] + s).abs() < 1e-12 && (got[1] - s).abs() < 1e-12);
    assert!((got[0] + 1.0).abs() < 1e-5);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[3, 2]));
    let msg = t.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    let c = t.constant(Tensor::zeros(&[4, 4]));
    assert!(t.matmul(a, c).is_err());
}

#[test]
fn log_and_sqrt_reject_negative_arguments() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(t64(&[2], &[1.0, -1.0]));
    assert!(matches!(t.log(x), Err(Error::Domain { .. })));
    assert!(matches!(t.sqrt(x), Err(Error::Domain { .. })));
}

#[test]
fn backward_of_sum_of_squares() {
    let mut t = Tape::<f64>::new();
    let x = t.param(t64(&[3], &[1.0, 2.0, 3.0]));
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum(sq);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_of_mean_is_one_over_n() {
    let mut t = Tape::<f64>::new();
    let x = t.param(random(&[2, 3, 4], 1));
    let loss = t.mean(x);
    t.backward(loss).unwrap();
    assert!(t.grad(x).unwrap().iter().all(|&g| (g - 1.0 / 24.0).abs() < 1e-15));
}

#[test]
fn cross_entropy_gradient_at_uniform_logits() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::zeros(&[1, 4]));
    let loss = t.cross_entropy(x, &[0]).unwrap();
    assert!((t.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
    t.backward(loss).unwrap();
    let want = [-0.75, 0.25, 0.25, 0.25];
    for (g, w) in t.grad(x).unwrap().iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn backward_rejects_non_scalar_and_empty_tapes() {
    let mut t = Tape::<f64>::new();
    let x = t.param(t64(&[2], &[1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(Error::Tape(_))));
    let y = t.scale(x, 2.0);
    assert!(matches!(t.backward(y), Err(Error::Tape(_))));
    let mut empty = Tape::<f64>::new();
    let c = empty.constant(Tensor::scalar(1.0));
    assert!(matches!(empty.backward(c), Err(Error::Tape(_))));
}

#[test]
fn inference_tape_records_nothing() {
    let mut t = Tape::<f64>::inference();
    let x = t.param(t64(&[2], &[1.0, 2.0]));
    let y = t.sum(x);
    assert!(!t.requires_grad(y));
    assert!(t.backward(y).is_err());
}

#[test]
fn grad_check_rejects_bad_step_and_handles_constants() {
    let x = random(&[3], 2);
    assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
    assert!(grad_check(|t, v| Ok(t.sum(v)), &x, -1e-3).is_err());
    let err = grad_check(|t, _| Ok(t.constant(Tensor::scalar(3.0))), &x, 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_sum_of_squares() {
    let x = random(&[7], 3);
    let err = grad_check(|t, v| {
        let sq = t.mul(v, v)?;
        Ok(t.sum(sq))
    }, &x, 1e-5)
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn primitive_gradients_elementwise() {
    let x = random(&[2, 6], 10);
    check("add", &x, |t, v| {
        let a = t.slice(v, 1, 0, 3)?;
        let b = t.slice(v, 1, 3, 6)?;
        t.add(a, b)
    });
    check("sub", &x, |t, v| {
        let a = t.slice(v, 1, 0, 3)?;
        let b = t.slice(v, 1, 3, 6)?;
        t.sub(a, b)
    });
    check("mul", &x, |t, v| {
        let a = t.slice(v, 1, 0, 3)?;
        let b = t.slice(v, 1, 3, 6)?;
        t.mul(a, b)
    });
    check("div", &x, |t, v| {
        let a = t.slice(v, 1, 0, 3)?;
        let b = t.slice(v, 1, 3, 6)?;
        let e = t.exp(b);
        t.div(a, e)
    });
    check("scale", &x, |t, v| Ok(t.scale(v, -1.7)));
    check("add_scalar", &x, |t, v| Ok(t.add_scalar(v, 0.3)));
    check("exp", &x, |t, v| Ok(t.exp(v)));
    check("log", &x, |t, v| {
        let e = t.exp(v);
        let s = t.add_scalar(e, 0.5);
        t.log(s)
    });
    check("sqrt", &x, |t, v| {
        let e = t.exp(v);
        t.sqrt(e)
    });
    check("tanh", &x, |t, v| Ok(t.tanh(v)));
    check("sigmoid", &x, |t, v| Ok(t.sigmoid(v)));
    check("silu", &x, |t, v| Ok(t.silu(v)));
}

#[test]
fn primitive_gradients_structural() {
    let x = random(&[3, 4], 11);
    check("matmul lhs", &x, |t, v| {
        let b = t.constant(random(&[4, 5], 12));
        t.matmul(v, b)
    });
    check("matmul rhs", &x, |t, v| {
        let a = t.constant(random(&[2, 3], 13));
        t.matmul(a, v)
    });
    check("matmul both", &x, |t, v| {
        let tr = t.transpose(v)?;
        t.matmul(v, tr)
    });
    check("reshape", &x, |t, v| t.reshape(v, &[2, 6]));
    check("transpose rank3", &x, |t, v| {
        let r = t.reshape(v, &[3, 2, 2])?;
        t.transpose(r)
    });
    check("concat axis1", &x, |t, v| {
        let a = t.slice(v, 1, 0, 1)?;
        let b = t.slice(v, 1, 1, 4)?;
        let e = t.exp(a);
        t.concat(&[b, e, a], 1)
    });
    check("concat axis0", &x, |t, v| t.concat(&[v, v], 0));
    check("slice", &x, |t, v| t.slice(v, 0, 1, 3));
    check("sum", &x, |t, v| Ok(t.sum(v)));
    check("mean", &x, |t, v| Ok(t.mean(v)));
    check("sum_axis", &x, |t, v| t.sum_axis(v, 0));
    check("mean_axis", &x, |t, v| {
        let r = t.reshape(v, &[3, 2, 2])?;
        t.mean_axis(r, 1)
    });
    check("gather", &x, |t, v| t.gather(v, &[2, 0, 2, 1]));
    check("embedding_lookup", &x, |t, v| t.embedding_lookup(v, &[1, 1, 0]));
    check("add_row", &x, |t, v| {
        let b = t.slice(v, 0, 0, 1)?;
        let b = t.reshape(b, &[4])?;
        t.add_row(v, b)
    });
    check("mul_row", &x, |t, v| {
        let b = t.slice(v, 0, 2, 3)?;
        let b = t.reshape(b, &[4])?;
        t.mul_row(v, b)
    });
}

#[test]
fn primitive_gradients_normalisation_and_attention() {
    let x = random(&[3, 4], 20);
    check("layer_norm", &x, |t, v| Ok(t.layer_norm(v, 1e-5)));
    check("softmax", &x, |t, v| Ok(t.softmax(v)));
    check("log_softmax", &x, |t, v| Ok(t.log_softmax(v)));
    check("l2_normalize", &x, |t, v| Ok(t.l2_normalize(v, 1e-12)));
    check("cross_entropy", &x, |t, v| t.cross_entropy(v, &[1, 3, 0]));

    let qkv = random(&[2, 3, 12], 21);
    check("attention", &qkv, |t, v| {
        let q = t.slice(v, 2, 0, 4)?;
        let k = t.slice(v, 2, 4, 8)?;
        let val = t.slice(v, 2, 8, 12)?;
        t.scaled_dot_product_attention(q, k, val)
    });
    let q = random(&[2, 1, 4], 22);
    check("cross attention", &q, |t, v| {
        let k = t.constant(random(&[2, 5, 4], 23));
        let val = t.constant(random(&[2, 5, 3], 24));
        t.scaled_dot_product_attention(v, k, val)
    });
    let feats = random(&[2, 4, 8], 25);
    check("temporal_shift", &feats, |t, v| t.temporal_shift(v, 4));
}

#[test]
fn softmax_and_attention_rows_sum_to_one() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(random(&[5, 7], 30).map(|v| v * 10.0));
    let y = t.softmax(x);
    for row in t.value(y).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    // With value vectors equal to one-hot rows of the identity, the attention
    // output rows are exactly the attention weights.
    let q = t.constant(random(&[2, 3, 4], 31));
    let k = t.constant(random(&[2, 5, 4], 32));
    let eye = Tensor::from_fn(&[2, 5, 5], |i| if (i % 25) / 5 == i % 5 { 1.0 } else { 0.0 });
    let v = t.constant(eye);
    let o = t.scaled_dot_product_attention(q, k, v).unwrap();
    for row in t.value(o).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn attention_rejects_mismatched_operands() {
    let mut t = Tape::<f64>::new();
    let q = t.constant(Tensor::zeros(&[2, 3, 4]));
    let k = t.constant(Tensor::zeros(&[2, 5, 3]));
    let v = t.constant(Tensor::zeros(&[2, 5, 3]));
    assert!(t.scaled_dot_product_attention(q, k, v).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// grad(a f + b g) = a grad f + b grad g.
    #[test]
    fn backward_is_linear(seed in 0u64..10_000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let x = random(&[2, 3], seed);
        let grad_of = |which: u8| -> Vec<f64> {
            let mut t = Tape::<f64>::new();
            let v = t.param(x.clone());
            let sq = t.mul(v, v).unwrap();
            let f = t.sum(sq);
            let th = t.tanh(v);
            let g = t.mean(th);
            let loss = match which {
                0 => f,
                1 => g,
                _ => {
                    let a = t.scale(f, alpha);
                    let b = t.scale(g, beta);
                    t.add(a, b).unwrap()
                }
            };
            t.backward(loss).unwrap();
            t.grad(v).unwrap().to_vec()
        };
        let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..gf.len() {
            prop_assert!((gc[i] - (alpha * gf[i] + beta * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_normalised(seed in 0u64..10_000, scale in 0.1f64..50.0) {
        let mut t = Tape::<f32>::new();
        let x = t.constant(SeededRng::new(seed).normal_tensor::<f32>(&[4, 9]).map(|v| v * scale as f32));
        let y = t.softmax(x);
        for row in t.value(y).data().chunks(9) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
