//! Named parameter sets, dense/attention layers and the Adam optimiser.

use crate::error::{invalid, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, named parameters of one model.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

/// Tape handles for every parameter of a [`ParamSet`], in insertion order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.params[idx].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Set the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.set_trainable("", trainable);
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect()
    }

    /// Register every parameter as a leaf; trainable ones require grad.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone(), p.trainable)).collect(),
        }
    }

    /// Bind all parameters as slices of one flat leaf (gradient checking).
    pub fn bind_flat(&self, tape: &mut Tape<T>, flat: Var) -> Result<Bound> {
        if tape.value(flat).len() != self.numel() {
            return Err(invalid("flat parameter vector has the wrong length"));
        }
        let mut offset = 0;
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let n = p.value.len();
            let s = tape.slice(flat, 0, offset, offset + n)?;
            vars.push(tape.reshape(s, p.value.dims())?);
            offset += n;
        }
        Ok(Bound { vars })
    }

    pub fn flatten(&self) -> Tensor<T> {
        Tensor::from_vec(self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect())
    }

    /// Names whose values differ bitwise between `self` and `other`.
    pub fn changed_since(&self, other: &Self) -> Vec<String> {
        self.params
            .iter()
            .zip(&other.params)
            .filter(|(a, b)| !a.value.bit_eq(&b.value))
            .map(|(a, _)| a.name.clone())
            .collect()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len() && self.changed_since(other).is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

fn init_normal<T: Scalar>(dims: &[usize], std: f64, rng: &mut SeededRng) -> Tensor<T> {
    Tensor::from_fn(dims, |_| T::of(rng.normal() * std))
}

/// `y = x W + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    w: usize,
    b: Option<usize>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        Self::with_std(ps, name, in_dim, out_dim, std, rng)
    }

    /// Zero-initialised weights: the layer starts as the constant zero map.
    pub fn zeros<T: Scalar>(ps: &mut ParamSet<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = ps.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let b = Some(ps.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self { w, b, in_dim, out_dim }
    }

    pub fn with_std<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let w = ps.add(format!("{name}.weight"), init_normal(&[in_dim, out_dim], std, rng));
        let b = Some(ps.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self { w, b, in_dim, out_dim }
    }

    /// `y = x W` with no bias term.
    pub fn without_bias<T: Scalar>(ps: &mut ParamSet<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = ps.add(format!("{name}.weight"), init_normal(&[in_dim, out_dim], std, rng));
        Self { w, b: None, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.get(self.w))?;
        match self.b {
            Some(b) => tape.add_row(y, p.get(b)),
            None => Ok(y),
        }
    }

    pub fn param_indices(&self) -> Vec<usize> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Two dense layers with a SiLU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, dims: [usize; 3], rng: &mut SeededRng) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dims[0], dims[1], rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), dims[1], dims[2], rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.silu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Learned elementwise affine after a parameter-free layer norm.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    gamma: usize,
    beta: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::filled(&[dim], T::one())),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, T::of(1e-5));
        let s = tape.mul_row(n, p.get(self.gamma))?;
        tape.add_row(s, p.get(self.beta))
    }
}

/// Single-head attention from `[B, Lq, width]` queries onto `[B, Lk, ctx_width]` context.
///
/// The key projection has no bias: a shift shared by all keys cancels in the softmax.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, width: usize, ctx_width: usize, rng: &mut SeededRng) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), width, width, rng),
            k: Linear::without_bias(ps, &format!("{name}.k"), ctx_width, width, rng),
            v: Linear::new(ps, &format!("{name}.v"), ctx_width, width, rng),
            o: Linear::new(ps, &format!("{name}.o"), width, width, rng),
        }
    }

    /// Like [`Attention::new`] but with a zero output projection, so the block
    /// contributes nothing until trained.
    pub fn zero_output<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        width: usize,
        ctx_width: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), width, width, rng),
            k: Linear::without_bias(ps, &format!("{name}.k"), ctx_width, width, rng),
            v: Linear::new(ps, &format!("{name}.v"), ctx_width, width, rng),
            o: Linear::zeros(ps, &format!("{name}.o"), width, width),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, ctx: Var) -> Result<Var> {
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, ctx)?;
        let v = self.v.forward(tape, p, ctx)?;
        let a = tape.scaled_dot_product_attention(q, k, v)?;
        self.o.forward(tape, p, a)
    }

    pub fn param_indices(&self) -> Vec<usize> {
        [self.q, self.k, self.v, self.o].iter().flat_map(|l| l.param_indices()).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 1.0,
        }
    }
}

/// Adam with decoupled weight decay, one instance per parameter set.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, ps: &ParamSet<T>) -> Self {
        Self {
            config,
            step: 0,
            m: ps.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            v: ps.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    /// Apply one update to every trainable parameter that received a gradient.
    /// Frozen parameters are never touched.
    pub fn step(&mut self, ps: &mut ParamSet<T>, tape: &Tape<T>, bound: &Bound) {
        self.step_with_lr(ps, tape, bound, self.config.lr);
    }

    pub fn step_with_lr(&mut self, ps: &mut ParamSet<T>, tape: &Tape<T>, bound: &Bound, lr: f64) {
        self.step += 1;
        let c = self.config;
        let mut norm2 = 0.0;
        for (p, &var) in ps.iter().zip(bound.vars()) {
            if let (true, Some(g)) = (p.trainable, tape.grad(var)) {
                norm2 += g.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
            }
        }
        let clip = if c.clip_norm > 0.0 && norm2.sqrt() > c.clip_norm {
            c.clip_norm / norm2.sqrt()
        } else {
            1.0
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, clip_t) = (T::one(), T::of(clip));
        for (i, (p, &var)) in ps.iter_mut().zip(bound.vars()).enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(g) = tape.grad(var) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = T::of(1.0 - lr * c.weight_decay);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip_t;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j].as_f64() / bc1;
                let vhat = v[j].as_f64() / bc2;
                *w = *w * decay - T::of(lr * mhat / (vhat.sqrt() + c.eps));
            }
        }
    }
}

/// Learning-rate multiplier: linear warmup then cosine decay to 10%.
pub fn lr_schedule(step: usize, total: usize) -> f64 {
    let warm = (total / 20).max(1);
    if step < warm {
        return (step + 1) as f64 / warm as f64;
    }
    let progress = (step - warm) as f64 / (total - warm).max(1) as f64;
    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

thread_local! {
    static PROGRESS: std::cell::RefCell<Option<Box<dyn FnMut(usize, usize, f64)>>> = const { std::cell::RefCell::new(None) };
}

/// Run `body` with `observer(step, steps, loss)` called after every
/// [`train_steps`] update on this thread. Observers do not nest; the previous
/// one is restored afterwards.
pub fn with_progress<R>(observer: impl FnMut(usize, usize, f64) + 'static, body: impl FnOnce() -> R) -> R {
    let prev = PROGRESS.with(|p| p.borrow_mut().replace(Box::new(observer)));
    let out = body();
    PROGRESS.with(|p| *p.borrow_mut() = prev);
    out
}

fn report_progress(step: usize, steps: usize, loss: f64) {
    PROGRESS.with(|p| {
        if let Some(f) = p.borrow_mut().as_mut() {
            f(step, steps, loss);
        }
    });
}

/// Run `steps` Adam updates jointly over several parameter sets.
///
/// `loss_fn(tape, bounds, step)` builds a scalar loss on a fresh tape, with
/// `bounds[i]` binding `sets[i]`. Returns the per-step loss values.
pub fn train_steps<T: Scalar>(
    sets: &mut [&mut ParamSet<T>],
    config: AdamConfig,
    steps: usize,
    mut loss_fn: impl FnMut(&mut Tape<T>, &[Bound], usize) -> Result<Var>,
) -> Result<Vec<f64>> {
    let mut opts: Vec<Adam<T>> = sets.iter().map(|ps| Adam::new(config, ps)).collect();
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut tape = Tape::new();
        let bounds: Vec<Bound> = sets.iter().map(|ps| ps.bind(&mut tape)).collect();
        let loss = loss_fn(&mut tape, &bounds, step)?;
        history.push(tape.value(loss).data()[0].as_f64());
        tape.backward(loss)?;
        let lr = config.lr * lr_schedule(step, steps);
        for ((ps, opt), bound) in sets.iter_mut().zip(&mut opts).zip(&bounds) {
            opt.step_with_lr(ps, &tape, bound, lr);
        }
        report_progress(step, steps, history[step]);
    }
    Ok(history)
}

/// Mean of consecutive `window`-sized chunks (a trailing partial chunk is dropped).
pub fn smooth(history: &[f64], window: usize) -> Vec<f64> {
    history.chunks_exact(window.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic_and_respects_freezing() {
        let mut ps = ParamSet::<f64>::new();
        let a = ps.add("a", Tensor::from_vec(vec![3.0, -2.0]));
        let b = ps.add("b", Tensor::from_vec(vec![5.0]));
        ps.set_trainable("b", false);
        let frozen = ps.get(b).value.clone();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            },
            &ps,
        );
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let bound = ps.bind(&mut tape);
            let av = bound.get(a);
            let bv = bound.get(b);
            let sq = tape.mul(av, av).unwrap();
            let s = tape.sum(sq);
            let bs = tape.sum(bv);
            let loss = tape.add(s, bs).unwrap();
            tape.backward(loss).unwrap();
            opt.step(&mut ps, &tape, &bound);
        }
        assert!(ps.get(a).value.data().iter().all(|x| x.abs() < 1e-2));
        assert!(ps.get(b).value.bit_eq(&frozen));
    }

    #[test]
    fn bind_flat_matches_bind() {
        let mut rng = SeededRng::new(0);
        let mut ps = ParamSet::<f64>::new();
        let lin = Linear::new(&mut ps, "l", 3, 2, &mut rng);
        let x = Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1);
        let mut t1 = Tape::new();
        let b1 = ps.bind(&mut t1);
        let xv = t1.constant(x.clone());
        let y1 = lin.forward(&mut t1, &b1, xv).unwrap();
        let mut t2 = Tape::new();
        let flat = t2.param(ps.flatten());
        let b2 = ps.bind_flat(&mut t2, flat).unwrap();
        let xv = t2.constant(x);
        let y2 = lin.forward(&mut t2, &b2, xv).unwrap();
        assert_eq!(t1.value(y1), t2.value(y2));
    }

    #[test]
    fn lr_schedule_warms_up_and_decays() {
        assert!(lr_schedule(0, 1000) < 0.1);
        assert!((lr_schedule(50, 1000) - 1.0).abs() < 1e-3);
        assert!((lr_schedule(999, 1000) - 0.1).abs() < 1e-3);
    }
}
