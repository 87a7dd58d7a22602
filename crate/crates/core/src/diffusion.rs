//! Variance schedules, the closed-form forward process, reverse samplers and
//! classifier-free guidance.
//!
//! Steps are 1-based: `t` ranges over `1..=T`, and `alpha_bar(0) = 1` denotes
//! the clean latent. Coefficients are computed in f64 and cast once per call.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl VarianceSchedule {
    /// Linear betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule requires 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|i| match steps {
                1 => beta_start,
                _ => beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64,
            })
            .collect();
        Ok(Self::from_betas(beta))
    }

    /// Linear schedule with 1000 steps over `[0.00085, 0.0120]`.
    pub fn reference() -> Self {
        Self::linear(1000, 0.00085, 0.0120).expect("valid constants")
    }

    /// Linear schedule with 100 steps over `[0.0085, 0.120]`; ends near the
    /// same `alpha_bar` as [`Self::reference`].
    pub fn toy() -> Self {
        Self::linear(100, 0.0085, 0.120).expect("valid constants")
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Self { beta, alpha, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Uniform step in `1..=T`.
    pub fn sample_step(&self, rng: &mut SeededRng) -> usize {
        1 + rng.below(self.steps())
    }
}

fn axpby<T: Scalar>(a: f64, x: &Tensor<T>, b: f64, y: &Tensor<T>, op: &'static str) -> Result<Tensor<T>> {
    let (a, b) = (T::of(a), T::of(b));
    x.zip_map(y, op, |x, y| a * x + b * y)
}

/// `sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse<T: Scalar>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &VarianceSchedule) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    axpby(ab.sqrt(), z0, (1.0 - ab).sqrt(), eps, "forward_diffuse")
}

/// Forward diffusion with one step per leading-axis row.
pub fn forward_diffuse_rows<T: Scalar>(
    z0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    sched: &VarianceSchedule,
) -> Result<Tensor<T>> {
    if z0.dims() != eps.dims() {
        return Err(Error::ShapeMismatch {
            op: "forward_diffuse",
            lhs: z0.dims().to_vec(),
            rhs: eps.dims().to_vec(),
        });
    }
    if ts.len() != z0.dims()[0] {
        return Err(Error::InvalidArgument(format!(
            "{} steps for a batch of {}",
            ts.len(),
            z0.dims()[0]
        )));
    }
    let row = z0.len() / ts.len();
    let mut out = Vec::with_capacity(z0.len());
    for (i, &t) in ts.iter().enumerate() {
        sched.check_step(t)?;
        let ab = sched.alpha_bar(t);
        let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
        let r = i * row..(i + 1) * row;
        out.extend(z0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(&x, &e)| a * x + b * e));
    }
    Tensor::new(z0.dims().to_vec(), out)
}

/// Sample `q(z_t | z_s)` for `s < t`: `sqrt(ab_t/ab_s) z_s + sqrt(1 - ab_t/ab_s) eps`.
pub fn transition<T: Scalar>(z_s: &Tensor<T>, s: usize, t: usize, eps: &Tensor<T>, sched: &VarianceSchedule) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    if s >= t {
        return Err(Error::InvalidArgument(format!("transition needs s < t, got {s} >= {t}")));
    }
    let ratio = sched.alpha_bar(t) / sched.alpha_bar(s);
    axpby(ratio.sqrt(), z_s, (1.0 - ratio).sqrt(), eps, "transition")
}

/// Ancestral step `t -> t-1`; no noise is added at `t = 1`.
pub fn ddpm_step<T: Scalar>(
    z_t: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    sched: &VarianceSchedule,
    rng: &mut SeededRng,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    let (a, b, ab) = (sched.alpha(t), sched.beta(t), sched.alpha_bar(t));
    let c = 1.0 / a.sqrt();
    let mean = axpby(c, z_t, -c * b / (1.0 - ab).sqrt(), eps_hat, "ddpm_step")?;
    if t == 1 {
        return Ok(mean);
    }
    let sigma = T::of(b.sqrt());
    Ok(Tensor::from_fn(mean.dims(), |i| mean.data()[i] + sigma * T::of(rng.normal())))
}

/// DDIM update between explicit cumulative products.
pub fn ddim_update<T: Scalar>(
    z_t: &Tensor<T>,
    ab_t: f64,
    ab_prev: f64,
    eps_hat: &Tensor<T>,
    eta: f64,
    rng: &mut SeededRng,
) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("eta must lie in [0, 1], got {eta}")));
    }
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)).max(0.0).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    // z_prev = sqrt(ab_prev) * z0_hat + dir * eps_hat, with z0_hat expanded.
    let k = (ab_prev / ab_t).sqrt();
    let c_eps = dir - k * (1.0 - ab_t).sqrt();
    let out = axpby(k, z_t, c_eps, eps_hat, "ddim_step")?;
    if sigma == 0.0 {
        return Ok(out);
    }
    let s = T::of(sigma);
    Ok(Tensor::from_fn(out.dims(), |i| out.data()[i] + s * T::of(rng.normal())))
}

/// DDIM step `t -> t_prev` with `t_prev = 0` meaning the clean latent.
pub fn ddim_step<T: Scalar>(
    z_t: &Tensor<T>,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor<T>,
    sched: &VarianceSchedule,
    eta: f64,
    rng: &mut SeededRng,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}")));
    }
    ddim_update(z_t, sched.alpha_bar(t), sched.alpha_bar(t_prev), eps_hat, eta, rng)
}

/// Predicted clean latent from a noise estimate.
pub fn predict_z0<T: Scalar>(z_t: &Tensor<T>, t: usize, eps_hat: &Tensor<T>, sched: &VarianceSchedule) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    axpby(1.0 / ab.sqrt(), z_t, -(1.0 - ab).sqrt() / ab.sqrt(), eps_hat, "predict_z0")
}

/// `eps_u + s (eps_c - eps_u)`.
pub fn cfg_combine<T: Scalar>(eps_uncond: &Tensor<T>, eps_cond: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    axpby(1.0 - s, eps_uncond, s, eps_cond, "cfg_combine")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampler {
    Ddpm,
    Ddim { steps: usize, eta: f64 },
}

impl Sampler {
    /// Descending `(t, t_prev)` pairs shared by every chain of one run.
    pub fn grid(&self, sched: &VarianceSchedule) -> Result<Vec<(usize, usize)>> {
        let big_t = sched.steps();
        match *self {
            Sampler::Ddpm => Ok((1..=big_t).rev().map(|t| (t, t - 1)).collect()),
            Sampler::Ddim { steps, .. } => {
                if steps == 0 || steps > big_t {
                    return Err(Error::InvalidArgument(format!("DDIM steps must lie in 1..={big_t}, got {steps}")));
                }
                let ts: Vec<usize> = (0..=steps).map(|i| (i * big_t).div_ceil(steps)).collect();
                Ok((1..=steps).rev().map(|i| (ts[i], ts[i - 1])).collect())
            }
        }
    }

    pub fn step<T: Scalar>(
        &self,
        z_t: &Tensor<T>,
        t: usize,
        t_prev: usize,
        eps_hat: &Tensor<T>,
        sched: &VarianceSchedule,
        rng: &mut SeededRng,
    ) -> Result<Tensor<T>> {
        match *self {
            Sampler::Ddpm => ddpm_step(z_t, t, eps_hat, sched, rng),
            Sampler::Ddim { eta, .. } => ddim_step(z_t, t, t_prev, eps_hat, sched, eta, rng),
        }
    }
}

/// Run a full reverse chain from `z_T`; `eps_fn(z_t, t)` returns the noise estimate.
pub fn sample_loop<T: Scalar>(
    sched: &VarianceSchedule,
    sampler: Sampler,
    z_big_t: Tensor<T>,
    rng: &mut SeededRng,
    mut eps_fn: impl FnMut(&Tensor<T>, usize) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut z = z_big_t;
    for (t, t_prev) in sampler.grid(sched)? {
        let eps = eps_fn(&z, t)?;
        z = sampler.step(&z, t, t_prev, &eps, sched, rng)?;
    }
    Ok(z)
}

/// Training draw for one batch: per-row steps, noise and the noised latent.
#[derive(Clone, Debug)]
pub struct NoisedBatch<T> {
    pub ts: Vec<usize>,
    pub eps: Tensor<T>,
    pub z_t: Tensor<T>,
}

pub fn noise_batch<T: Scalar>(z0: &Tensor<T>, sched: &VarianceSchedule, rng: &mut SeededRng) -> Result<NoisedBatch<T>> {
    let ts: Vec<usize> = (0..z0.dims()[0]).map(|_| sched.sample_step(rng)).collect();
    noise_batch_at(z0, ts, sched, rng)
}

pub fn noise_batch_at<T: Scalar>(
    z0: &Tensor<T>,
    ts: Vec<usize>,
    sched: &VarianceSchedule,
    rng: &mut SeededRng,
) -> Result<NoisedBatch<T>> {
    let eps = rng.normal_tensor(z0.dims());
    let z_t = forward_diffuse_rows(z0, &ts, &eps, sched)?;
    Ok(NoisedBatch { ts, eps, z_t })
}

/// Mean squared error between the true noise and `predict(z_t, ts)` on a fresh draw.
pub fn denoising_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z0: &Tensor<T>,
    sched: &VarianceSchedule,
    rng: &mut SeededRng,
    predict: impl FnOnce(&mut Tape<T>, Var, &[usize]) -> Result<Var>,
) -> Result<Var> {
    let batch = noise_batch(z0, sched, rng)?;
    loss_on_batch(tape, &batch, predict)
}

pub fn loss_on_batch<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &NoisedBatch<T>,
    predict: impl FnOnce(&mut Tape<T>, Var, &[usize]) -> Result<Var>,
) -> Result<Var> {
    let z_t = tape.constant(batch.z_t.clone());
    let eps = tape.constant(batch.eps.clone());
    let pred = predict(tape, z_t, &batch.ts)?;
    tape.mse(pred, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        (m, v.sqrt())
    }

    #[test]
    fn reference_schedule_endpoints() {
        let s = VarianceSchedule::reference();
        assert_eq!(s.steps(), 1000);
        assert!((s.alpha_bar(1) - 0.99915).abs() < 1e-15);
        assert!((s.beta(1000) - 0.0120).abs() < 1e-15);
        let last = s.alpha_bar(1000);
        assert!(last > 1e-4 && last < 1e-2, "{last}");
        // Independent evaluation order: exp of a log-sum.
        let log_sum: f64 = (0..1000).map(|i| (1.0 - (0.00085 + (0.0120 - 0.00085) * i as f64 / 999.0)).ln()).sum();
        assert!((last - log_sum.exp()).abs() / last < 1e-10);
    }

    #[test]
    fn schedule_invariants_and_errors() {
        let s = VarianceSchedule::linear(100, 1e-3, 0.05).unwrap();
        for t in 2..=100 {
            assert!(s.beta(t) >= s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
        }
        let one = VarianceSchedule::linear(1, 0.02, 0.5).unwrap();
        assert_eq!(one.beta(1), 0.02);
        assert_eq!(one.alpha_bar(1), 0.98);
        assert!(VarianceSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(VarianceSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(VarianceSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(VarianceSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_limits_and_range() {
        let s = VarianceSchedule::linear(10, 1e-9, 1e-9).unwrap();
        let z0 = Tensor::<f64>::from_vec(vec![0.3, -1.2]);
        let eps = Tensor::from_vec(vec![1.0, 1.0]);
        let out = forward_diffuse(&z0, 1, &eps, &s).unwrap();
        assert!(out.data().iter().zip(z0.data()).all(|(a, b)| (a - b).abs() < 1e-4));

        let r = VarianceSchedule::reference();
        let zero = Tensor::<f64>::zeros(&[2]);
        let out = forward_diffuse(&zero, 500, &eps, &r).unwrap();
        let expect = (1.0 - r.alpha_bar(500)).sqrt();
        assert!(out.data().iter().all(|&v| (v - expect).abs() < 1e-15));
        assert!(forward_diffuse(&zero, 0, &eps, &r).is_err());
        assert!(forward_diffuse(&zero, 1001, &eps, &r).is_err());
    }

    #[test]
    fn composed_transition_matches_direct_marginal() {
        let sched = VarianceSchedule::reference();
        let mut rng = SeededRng::new(11);
        let n = 20_000;
        let z0 = Tensor::<f64>::filled(&[n], 1.0);
        let (s, t) = (250, 700);
        let zs = forward_diffuse(&z0, s, &rng.normal_tensor(&[n]), &sched).unwrap();
        let zt = transition(&zs, s, t, &rng.normal_tensor(&[n]), &sched).unwrap();
        let (m, sd) = stats(zt.data());
        let (m0, sd0) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
        assert!((m - m0).abs() <= 0.02 * sd0, "{m} vs {m0}");
        assert!((sd / sd0 - 1.0).abs() <= 0.02, "{sd} vs {sd0}");
    }

    #[test]
    fn ddpm_limits_and_determinism() {
        let s = VarianceSchedule::linear(10, 1e-12, 1e-12).unwrap();
        let z = Tensor::<f64>::from_vec(vec![0.5, -0.25]);
        let eps = Tensor::from_vec(vec![0.1, 0.2]);
        let out = ddpm_step(&z, 5, &eps, &s, &mut SeededRng::new(1)).unwrap();
        assert!(out.data().iter().zip(z.data()).all(|(a, b)| (a - b).abs() < 1e-5));

        let r = VarianceSchedule::reference();
        let a = ddpm_step(&z, 400, &eps, &r, &mut SeededRng::new(9)).unwrap();
        let b = ddpm_step(&z, 400, &eps, &r, &mut SeededRng::new(9)).unwrap();
        assert!(a.bit_eq(&b));
        assert!(ddpm_step(&z, 0, &eps, &r, &mut SeededRng::new(9)).is_err());
    }

    #[test]
    fn ddpm_with_exact_denoiser_recovers_point_mass() {
        // For data concentrated at z0 the optimal prediction is (z_t - sqrt(ab) z0) / sqrt(1 - ab).
        let sched = VarianceSchedule::reference();
        let z0 = Tensor::<f64>::from_vec(vec![0.8, -0.4, 1.5, 0.0, -1.1, 0.3, 0.6, -0.9]);
        let mut rng = SeededRng::new(5);
        let start = rng.normal_tensor(z0.dims());
        let out = sample_loop(&sched, Sampler::Ddpm, start, &mut rng, |z, t| {
            let ab = sched.alpha_bar(t);
            axpby(1.0 / (1.0 - ab).sqrt(), z, -(ab / (1.0 - ab)).sqrt(), &z0, "oracle")
        })
        .unwrap();
        let rms = (out.data().iter().zip(z0.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 8.0).sqrt();
        assert!(rms < 0.1, "rms {rms}");
    }

    #[test]
    fn ddim_degenerate_and_deterministic() {
        let z = Tensor::<f64>::from_vec(vec![0.7, -0.2, 1.3]);
        let eps = Tensor::from_vec(vec![0.4, 0.1, -0.6]);
        let same = ddim_update(&z, 0.6, 0.6, &eps, 0.0, &mut SeededRng::new(0)).unwrap();
        assert!(same.data().iter().zip(z.data()).all(|(a, b)| (a - b).abs() < 1e-12));

        let r = VarianceSchedule::reference();
        let a = ddim_step(&z, 500, 480, &eps, &r, 0.0, &mut SeededRng::new(1)).unwrap();
        let b = ddim_step(&z, 500, 480, &eps, &r, 0.0, &mut SeededRng::new(2)).unwrap();
        assert!(a.bit_eq(&b));
        assert!(ddim_step(&z, 500, 500, &eps, &r, 0.0, &mut SeededRng::new(1)).is_err());
        assert!(ddim_step(&z, 500, 10, &eps, &r, 1.5, &mut SeededRng::new(1)).is_err());
    }

    #[test]
    fn ddim_unit_step_eta_one_matches_ddpm() {
        // With t_prev = t - 1 and eta = 1 the DDIM variance is the posterior
        // variance, which agrees with beta_t away from the first few steps.
        let sched = VarianceSchedule::reference();
        let n = 20_000;
        for t in [250usize, 500, 1000] {
            let z = Tensor::<f64>::filled(&[n], 0.4);
            let eps = Tensor::<f64>::filled(&[n], -0.3);
            let a = ddim_step(&z, t, t - 1, &eps, &sched, 1.0, &mut SeededRng::new(3)).unwrap();
            let b = ddpm_step(&z, t, &eps, &sched, &mut SeededRng::new(4)).unwrap();
            let (ma, sa) = stats(a.data());
            let (mb, sb) = stats(b.data());
            assert!((ma - mb).abs() <= 0.02 * ma.abs().max(sb), "t={t}: {ma} vs {mb}");
            assert!((sa / sb - 1.0).abs() <= 0.02, "t={t}: {sa} vs {sb}");
        }
    }

    #[test]
    fn cfg_examples() {
        let u = Tensor::<f64>::from_vec(vec![0.0]);
        let c = Tensor::from_vec(vec![1.0]);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap().data(), &[1.0]);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap().data(), &[0.0]);
        assert_eq!(cfg_combine(&u, &c, 2.0).unwrap().data(), &[2.0]);
        assert!(cfg_combine(&u, &Tensor::from_vec(vec![1.0, 2.0]), 2.0).is_err());
    }

    #[test]
    fn grids_are_descending_and_complete() {
        let s = VarianceSchedule::linear(100, 1e-4, 0.02).unwrap();
        let g = Sampler::Ddim { steps: 50, eta: 1.0 }.grid(&s).unwrap();
        assert_eq!(g.len(), 50);
        assert_eq!(g[0].0, 100);
        assert_eq!(g.last().unwrap().1, 0);
        assert!(g.windows(2).all(|w| w[0].1 == w[1].0 && w[0].0 > w[0].1));
        let g = Sampler::Ddim { steps: 30, eta: 1.0 }.grid(&s).unwrap();
        assert!(g.iter().all(|&(t, p)| t > p));
        assert_eq!(Sampler::Ddpm.grid(&s).unwrap().len(), 100);
        assert!(Sampler::Ddim { steps: 101, eta: 0.0 }.grid(&s).is_err());
    }

    #[test]
    fn oracle_and_zero_denoiser_losses() {
        let sched = VarianceSchedule::reference();
        let z0 = SeededRng::new(1).normal_tensor::<f64>(&[64, 16]);
        let mut tape = Tape::new();
        let mut rng = SeededRng::new(2);
        let batch = noise_batch(&z0, &sched, &mut rng).unwrap();
        let eps = batch.eps.clone();
        let loss = loss_on_batch(&mut tape, &batch, |tape, _, _| Ok(tape.constant(eps))).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);

        let big = SeededRng::new(3).normal_tensor::<f64>(&[4096, 16]);
        let loss = denoising_loss(&mut tape, &big, &sched, &mut rng, |tape, z, _| {
            let d = tape.dims(z).to_vec();
            Ok(tape.constant(Tensor::zeros(&d)))
        })
        .unwrap();
        let l = tape.value(loss).data()[0];
        assert!((l - 1.0).abs() < 0.02, "{l}");
    }
}
