//! Gradient integrity suite: every tape primitive and the two training
//! objectives checked against central finite differences in f64.

use crate::codecs::{batched, latent_dims};
use crate::denoiser::{Conditioning, Denoiser, DenoiserConfig, CONTEXT_WIDTH};
use crate::diffusion::{denoising_loss, VarianceSchedule};
use crate::error::Result;
use crate::joint::{cross_loss, EnvironmentEncoder};
use crate::rng::SeededRng;
use crate::tensor::{grad_check, Tape, Tensor, Var};
use crate::world::Modality;

/// Tolerance for single primitives.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
/// Tolerance through a full training objective.
pub const OBJECTIVE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

fn random(dims: &[usize], seed: u64) -> Tensor<f64> {
    SeededRng::new(seed).normal_tensor(dims)
}

fn positive(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn(dims, |_| rng.uniform_range(0.5, 2.0))
}

// Fixed random weights keep coordinates from cancelling by symmetry.
fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let w = tape.constant(random(tape.dims(y), 99));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type Unary = fn(&mut Tape<f64>, Var) -> Result<Var>;

fn other(tape: &mut Tape<f64>, dims: &[usize]) -> Var {
    tape.constant(random(dims, 17))
}

fn primitives() -> Vec<(&'static str, Tensor<f64>, Unary)> {
    vec![
        ("add", random(&[3, 4], 1), |t, x| {
            let y = other(t, &[3, 4]);
            t.add(x, y)
        }),
        ("sub", random(&[3, 4], 2), |t, x| {
            let y = other(t, &[3, 4]);
            t.sub(y, x)
        }),
        ("mul", random(&[3, 4], 3), |t, x| {
            let y = other(t, &[3, 4]);
            t.mul(x, y)
        }),
        ("div", positive(&[3, 4], 4), |t, x| {
            let y = other(t, &[3, 4]);
            let a = t.div(y, x)?;
            let b = t.div(x, x)?;
            t.add(a, b)
        }),
        ("add_row", random(&[4], 5), |t, b| {
            let x = other(t, &[3, 4]);
            t.add_row(x, b)
        }),
        ("mul_row", random(&[4], 6), |t, g| {
            let x = other(t, &[3, 4]);
            t.mul_row(x, g)
        }),
        ("scale", random(&[5], 7), |t, x| Ok(t.scale(x, 1.7))),
        ("add_scalar", random(&[5], 8), |t, x| Ok(t.add_scalar(x, -0.3))),
        ("exp", random(&[5], 9), |t, x| Ok(t.exp(x))),
        ("log", positive(&[5], 10), |t, x| t.log(x)),
        ("sqrt", positive(&[5], 11), |t, x| t.sqrt(x)),
        ("tanh", random(&[5], 12), |t, x| Ok(t.tanh(x))),
        ("sigmoid", random(&[5], 13), |t, x| Ok(t.sigmoid(x))),
        ("silu", random(&[5], 14), |t, x| Ok(t.silu(x))),
        ("matmul", random(&[3, 4], 15), |t, a| {
            let b = other(t, &[4, 2]);
            let left = t.matmul(a, b)?;
            let c = other(t, &[2, 3]);
            let right = t.matmul(c, a)?;
            let l = t.sum(left);
            let r = t.sum(right);
            t.add(l, r)
        }),
        ("batched_matmul", random(&[2, 3, 4], 16), |t, a| {
            let b = other(t, &[4, 2]);
            t.matmul(a, b)
        }),
        ("transpose", random(&[3, 4], 18), |t, x| t.transpose(x)),
        ("reshape", random(&[3, 4], 19), |t, x| t.reshape(x, &[2, 6])),
        ("concat", random(&[2, 3], 20), |t, x| {
            let y = other(t, &[2, 2]);
            t.concat(&[x, y, x], 1)
        }),
        ("slice", random(&[4, 3], 21), |t, x| t.slice(x, 0, 1, 3)),
        ("gather", random(&[5, 3], 22), |t, x| t.gather(x, &[4, 0, 4, 2])),
        ("sum", random(&[3, 4], 23), |t, x| Ok(t.sum(x))),
        ("mean", random(&[3, 4], 24), |t, x| Ok(t.mean(x))),
        ("sum_axis", random(&[2, 3, 4], 25), |t, x| t.sum_axis(x, 1)),
        ("mean_axis", random(&[2, 3, 4], 26), |t, x| t.mean_axis(x, 2)),
        ("layer_norm", random(&[3, 6], 27), |t, x| Ok(t.layer_norm(x, 1e-5))),
        ("softmax", random(&[3, 5], 28), |t, x| Ok(t.softmax(x))),
        ("log_softmax", random(&[3, 5], 29), |t, x| Ok(t.log_softmax(x))),
        ("l2_normalize", random(&[3, 4], 30), |t, x| Ok(t.l2_normalize(x, 1e-8))),
        ("attention", random(&[2, 3, 4], 31), |t, q| {
            let k = other(t, &[2, 5, 4]);
            let kv = t.tanh(k);
            let a = t.scaled_dot_product_attention(q, k, kv)?;
            // Gradient through keys and values as well as queries.
            let b = t.scaled_dot_product_attention(k, q, q)?;
            let a = t.sum(a);
            let b = weighted_sum(t, b)?;
            t.add(a, b)
        }),
        ("temporal_shift", random(&[2, 4, 8], 32), |t, x| t.temporal_shift(x, 4)),
        ("mse", random(&[3, 4], 33), |t, x| {
            let y = other(t, &[3, 4]);
            t.mse(x, y)
        }),
        ("cross_entropy", random(&[4, 6], 34), |t, x| t.cross_entropy(x, &[0, 5, 2, 2])),
    ]
}

fn small_net() -> DenoiserConfig {
    DenoiserConfig {
        width: 8,
        blocks: 1,
        temporal_chunks: 4,
        temporal: true,
    }
}

// A random (not zero) environment output lets the coupling path carry gradient.
fn active_net(m: Modality, rng: &mut SeededRng) -> Result<Denoiser<f64>> {
    let mut net = Denoiser::<f64>::new(m, small_net(), rng)?;
    for p in net.params.iter_mut().filter(|p| p.name.contains(".env.attn.o.weight")) {
        p.value = Tensor::from_fn(p.value.dims(), |_| rng.normal());
    }
    Ok(net)
}

fn conditioning(rng: &mut SeededRng) -> Conditioning<f64> {
    Conditioning {
        vectors: rng.normal_tensor(&[2, CONTEXT_WIDTH]),
        null: vec![false, true],
    }
}

fn objectives() -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let mut rng = SeededRng::new(41);
    let sched = VarianceSchedule::toy();
    for m in [Modality::Image, Modality::Video] {
        let net = Denoiser::<f64>::new(m, small_net(), &mut rng)?;
        let z0 = rng.normal_tensor::<f64>(&batched(2, latent_dims(m)));
        let cond = conditioning(&mut rng);
        let error = grad_check(
            |tape, w| {
                let p = net.params.bind_flat(tape, w)?;
                // Same noise and steps on every evaluation.
                let mut draw = SeededRng::new(3);
                denoising_loss(tape, &z0, &sched, &mut draw, |tape, z, ts| net.forward(tape, &p, z, ts, &cond, None))
            },
            &net.params.flatten(),
            1e-4,
        )?;
        out.push(GradCheck {
            name: format!("denoising_loss.{m}"),
            error,
            tolerance: OBJECTIVE_TOLERANCE,
        });
    }

    let (ma, mb) = (Modality::Video, Modality::Audio);
    let net = active_net(ma, &mut rng)?;
    let v = EnvironmentEncoder::<f64>::new(mb, 8, &mut rng);
    let z0a = rng.normal_tensor::<f64>(&batched(2, latent_dims(ma)));
    let z0b = rng.normal_tensor::<f64>(&batched(2, latent_dims(mb)));
    let cond = conditioning(&mut rng);
    let through_net = grad_check(
        |tape, w| {
            let p = net.params.bind_flat(tape, w)?;
            let pv = v.params.bind(tape);
            let mut draw = SeededRng::new(4);
            cross_loss(tape, &net, &p, &z0a, &v, &pv, &z0b, &cond, &sched, &mut draw)
        },
        &net.params.flatten(),
        1e-4,
    )?;
    let through_env = grad_check(
        |tape, w| {
            let p = net.params.bind(tape);
            let pv = v.params.bind_flat(tape, w)?;
            let mut draw = SeededRng::new(4);
            cross_loss(tape, &net, &p, &z0a, &v, &pv, &z0b, &cond, &sched, &mut draw)
        },
        &v.params.flatten(),
        1e-4,
    )?;
    out.push(GradCheck {
        name: "cross_loss.denoiser".into(),
        error: through_net,
        tolerance: OBJECTIVE_TOLERANCE,
    });
    out.push(GradCheck {
        name: "cross_loss.environment".into(),
        error: through_env,
        tolerance: OBJECTIVE_TOLERANCE,
    });
    Ok(out)
}

/// Run every check. Failing checks are reported, not raised.
pub fn gradient_suite() -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for (name, x, f) in primitives() {
        let error = grad_check(
            |t, v| {
                let y = f(t, v)?;
                weighted_sum(t, y)
            },
            &x,
            1e-5,
        )?;
        out.push(GradCheck {
            name: name.into(),
            error,
            tolerance: PRIMITIVE_TOLERANCE,
        });
    }
    out.extend(objectives()?);
    Ok(out)
}
