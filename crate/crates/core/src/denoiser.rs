//! Noise-prediction networks over latent tokens.
//!
//! A latent becomes `L` tokens of width 16 (one for image/audio/text, one per
//! frame for video), projected to the model width. Each block applies, in
//! order:
//!
//! 1. video only: `x = h + shift(dense(h))`, then `h = x + self_attn(norm(x))`
//! 2. `h += cross_attn(norm(h), condition token)`
//! 3. when environment tokens are supplied: `h += env_attn(norm(h), env tokens)`
//! 4. `h += mlp(norm(h))`
//!
//! The environment sublayer starts with a zero output projection and is the
//! only path through which other modalities influence the prediction.

use crate::alignment::{ConditionEmbedding, PromptEncoders, EMBED_DIM};
use crate::codecs::{batched, latent_dims, Codec, LATENT_WIDTH};
use crate::diffusion::{cfg_combine, denoising_loss, sample_loop, Sampler, VarianceSchedule};
use crate::error::{Error, Result};
use crate::nn::{train_steps, AdamConfig, Attention, Bound, LayerNorm, Linear, Mlp, ParamSet};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::world::{make_batch, Modality, PairingPolicy};

/// Width of the sinusoidal timestep features.
pub const TIME_FEATURES: usize = 16;
/// Token width of environment tokens and condition tokens.
pub const CONTEXT_WIDTH: usize = EMBED_DIM;

/// Channel-chunked forward time shift of `[time, channels]` features.
///
/// Chunk `i` covers channels `i * C/k .. (i + 1) * C/k` and is moved forward by
/// `i` steps; vacated leading steps become zero and trailing values are dropped.
pub fn temporal_shift<T: Scalar>(x: &Tensor<T>, chunks: usize) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::InvalidArgument(format!("temporal_shift expects [time, channels], got {:?}", x.dims())));
    }
    let mut tape = Tape::inference();
    let (time, channels) = (x.dims()[0], x.dims()[1]);
    let v = tape.constant(x.clone().reshape(&[1, time, channels])?);
    let y = tape.temporal_shift(v, chunks)?;
    tape.value(y).clone().reshape(&[time, channels])
}

/// Sinusoidal features `[sin(t f_i), cos(t f_i)]` with geometric frequencies.
pub fn time_features(t: usize) -> [f64; TIME_FEATURES] {
    let half = TIME_FEATURES / 2;
    let mut out = [0.0; TIME_FEATURES];
    for i in 0..half {
        let f = (-(1000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t as f64 * f).sin();
        out[half + i] = (t as f64 * f).cos();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub width: usize,
    pub blocks: usize,
    /// Chunk count of the temporal shift; must divide `width`.
    pub temporal_chunks: usize,
    /// Temporal modules are built for video only, and only when enabled.
    pub temporal: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: 2,
            temporal_chunks: 4,
            temporal: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Temporal {
    dense: Linear,
    norm: LayerNorm,
    attn: Attention,
}

#[derive(Clone, Debug)]
struct Block {
    temporal: Option<Temporal>,
    cross_norm: LayerNorm,
    cross: Attention,
    env_norm: LayerNorm,
    env: Attention,
    /// Learned key/value slot the environment attention can fall back on
    /// when the partner tokens carry nothing useful.
    env_sink: usize,
    mlp_norm: LayerNorm,
    mlp: Mlp,
}

/// Per-row condition: a shared-space vector, or the learned null token.
#[derive(Clone, Debug)]
pub struct Conditioning<T> {
    pub vectors: Tensor<T>,
    pub null: Vec<bool>,
}

impl<T: Scalar> Conditioning<T> {
    pub fn null(batch: usize) -> Self {
        Self {
            vectors: Tensor::zeros(&[batch, CONTEXT_WIDTH]),
            null: vec![true; batch],
        }
    }

    /// The same embedding on every row.
    pub fn repeat(e: &ConditionEmbedding, batch: usize) -> Self {
        Self {
            vectors: Tensor::from_fn(&[batch, CONTEXT_WIDTH], |i| T::of(e.vector[i % CONTEXT_WIDTH])),
            null: vec![false; batch],
        }
    }

    /// One embedding per row from a `[B, 16]` tensor.
    pub fn rows(vectors: Tensor<T>) -> Self {
        let b = vectors.dims()[0];
        Self {
            vectors,
            null: vec![false; b],
        }
    }

    pub fn batch(&self) -> usize {
        self.null.len()
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    pub modality: Modality,
    pub config: DenoiserConfig,
    in_proj: Linear,
    time_mlp: Mlp,
    null_token: usize,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    out_proj: Linear,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(modality: Modality, config: DenoiserConfig, rng: &mut SeededRng) -> Result<Self> {
        let d = config.width;
        let temporal = config.temporal && modality == Modality::Video;
        if temporal && (config.temporal_chunks == 0 || d % config.temporal_chunks != 0) {
            return Err(Error::InvalidArgument(format!(
                "temporal chunk count {} must divide the width {d}",
                config.temporal_chunks
            )));
        }
        let mut ps = ParamSet::new();
        let in_proj = Linear::new(&mut ps, "in_proj", LATENT_WIDTH, d, rng);
        let time_mlp = Mlp::new(&mut ps, "time", [TIME_FEATURES, d, d], rng);
        let null_token = ps.add(
            "null_token",
            Tensor::from_fn(&[1, CONTEXT_WIDTH], |_| T::of(rng.normal() / (CONTEXT_WIDTH as f64).sqrt())),
        );
        let blocks = (0..config.blocks)
            .map(|i| {
                let n = format!("block{i}");
                Block {
                    temporal: temporal.then(|| Temporal {
                        dense: Linear::new(&mut ps, &format!("{n}.temporal.dense"), d, d, rng),
                        norm: LayerNorm::new(&mut ps, &format!("{n}.temporal.norm"), d),
                        attn: Attention::new(&mut ps, &format!("{n}.temporal.attn"), d, d, rng),
                    }),
                    cross_norm: LayerNorm::new(&mut ps, &format!("{n}.cross.norm"), d),
                    cross: Attention::new(&mut ps, &format!("{n}.cross.attn"), d, CONTEXT_WIDTH, rng),
                    env_norm: LayerNorm::new(&mut ps, &format!("{n}.env.norm"), d),
                    env: Attention::zero_output(&mut ps, &format!("{n}.env.attn"), d, CONTEXT_WIDTH, rng),
                    env_sink: ps.add(
                        format!("{n}.env.sink"),
                        Tensor::from_fn(&[1, CONTEXT_WIDTH], |_| T::of(rng.normal() / (CONTEXT_WIDTH as f64).sqrt())),
                    ),
                    mlp_norm: LayerNorm::new(&mut ps, &format!("{n}.mlp.norm"), d),
                    mlp: Mlp::new(&mut ps, &format!("{n}.mlp"), [d, 2 * d, d], rng),
                }
            })
            .collect();
        let out_norm = LayerNorm::new(&mut ps, "out.norm", d);
        let out_proj = Linear::new(&mut ps, "out.proj", d, LATENT_WIDTH, rng);
        Ok(Self {
            modality,
            config,
            in_proj,
            time_mlp,
            null_token,
            blocks,
            out_norm,
            out_proj,
            params: ps,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser {
            modality: self.modality,
            config: self.config,
            in_proj: self.in_proj,
            time_mlp: self.time_mlp,
            null_token: self.null_token,
            blocks: self.blocks.clone(),
            out_norm: self.out_norm,
            out_proj: self.out_proj,
            params: self.params.cast(),
        }
    }

    /// Copy of the architecture without parameter values.
    pub fn layout(&self) -> Denoiser<T> {
        Denoiser {
            modality: self.modality,
            config: self.config,
            in_proj: self.in_proj,
            time_mlp: self.time_mlp,
            null_token: self.null_token,
            blocks: self.blocks.clone(),
            out_norm: self.out_norm,
            out_proj: self.out_proj,
            params: ParamSet::new(),
        }
    }

    pub fn tokens(&self) -> usize {
        latent_dims(self.modality).iter().product::<usize>() / LATENT_WIDTH
    }

    pub fn has_temporal(&self) -> bool {
        self.blocks.iter().any(|b| b.temporal.is_some())
    }

    /// Is `name` a parameter of the environment cross-attention sublayers?
    pub fn is_env_param(name: &str) -> bool {
        name.contains(".env.")
    }

    /// Trainable flags: environment sublayers vs everything else.
    pub fn set_trainable_groups(&mut self, base: bool, env: bool) {
        for p in self.params.iter_mut() {
            p.trainable = if Self::is_env_param(&p.name) { env } else { base };
        }
    }

    /// Zero the environment output projections, removing all cross-modal coupling.
    pub fn zero_env_attention(&mut self) {
        for p in self.params.iter_mut().filter(|p| Self::is_env_param(&p.name) && p.name.contains(".attn.o.")) {
            p.value.data_mut().fill(T::zero());
        }
    }

    /// Noise prediction on the tape.
    ///
    /// `z_t`: `[B] + latent_dims`; `ts`: one step per row; `env`: optional
    /// `[B, Le, 16]` environment tokens.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        z_t: Var,
        ts: &[usize],
        cond: &Conditioning<T>,
        env: Option<Var>,
    ) -> Result<Var> {
        let zd = tape.dims(z_t).to_vec();
        let b = zd[0];
        if zd[1..] != *latent_dims(self.modality) {
            return Err(Error::ShapeMismatch {
                op: "predict_noise",
                lhs: zd,
                rhs: batched(b, latent_dims(self.modality)),
            });
        }
        if ts.len() != b || cond.batch() != b {
            return Err(Error::InvalidArgument(format!(
                "batch of {b} latents with {} steps and {} conditions",
                ts.len(),
                cond.batch()
            )));
        }
        if cond.vectors.dims() != [b, CONTEXT_WIDTH] {
            return Err(Error::ShapeMismatch {
                op: "predict_noise condition",
                lhs: cond.vectors.dims().to_vec(),
                rhs: vec![b, CONTEXT_WIDTH],
            });
        }
        if let Some(e) = env {
            let ed = tape.dims(e);
            if ed.len() != 3 || ed[0] != b || ed[2] != CONTEXT_WIDTH {
                return Err(Error::ShapeMismatch {
                    op: "predict_noise environment",
                    lhs: ed.to_vec(),
                    rhs: vec![b, 2, CONTEXT_WIDTH],
                });
            }
        }
        let l = self.tokens();
        let d = self.config.width;

        let x = tape.reshape(z_t, &[b, l, LATENT_WIDTH])?;
        let mut h = self.in_proj.forward(tape, p, x)?;

        let feats: Vec<T> = ts
            .iter()
            .flat_map(|&t| {
                let f = time_features(t);
                (0..l).flat_map(move |_| f.into_iter().map(T::of))
            })
            .collect();
        let tf = tape.constant(Tensor::new(vec![b, l, TIME_FEATURES], feats)?);
        let temb = self.time_mlp.forward(tape, p, tf)?;
        h = tape.add(h, temb)?;

        let cvals = tape.constant(cond.vectors.clone());
        let table = tape.concat(&[p.get(self.null_token), cvals], 0)?;
        let ids: Vec<usize> = (0..b).map(|i| if cond.null[i] { 0 } else { i + 1 }).collect();
        let ctok = tape.gather(table, &ids)?;
        let ctx = tape.reshape(ctok, &[b, 1, CONTEXT_WIDTH])?;

        for blk in &self.blocks {
            if let Some(tm) = &blk.temporal {
                let u = tm.dense.forward(tape, p, h)?;
                let s = tape.temporal_shift(u, self.config.temporal_chunks)?;
                let x = tape.add(h, s)?;
                let n = tm.norm.forward(tape, p, x)?;
                let a = tm.attn.forward(tape, p, n, n)?;
                h = tape.add(x, a)?;
            }
            let n = blk.cross_norm.forward(tape, p, h)?;
            let a = blk.cross.forward(tape, p, n, ctx)?;
            h = tape.add(h, a)?;
            if let Some(e) = env {
                let n = blk.env_norm.forward(tape, p, h)?;
                let sink = tape.gather(p.get(blk.env_sink), &vec![0; b])?;
                let sink = tape.reshape(sink, &[b, 1, CONTEXT_WIDTH])?;
                let kv = tape.concat(&[sink, e], 1)?;
                let a = blk.env.forward(tape, p, n, kv)?;
                h = tape.add(h, a)?;
            }
            let n = blk.mlp_norm.forward(tape, p, h)?;
            let m = blk.mlp.forward(tape, p, n)?;
            h = tape.add(h, m)?;
        }
        debug_assert_eq!(tape.dims(h), [b, l, d]);
        let n = self.out_norm.forward(tape, p, h)?;
        let y = self.out_proj.forward(tape, p, n)?;
        tape.reshape(y, &zd)
    }

    /// Inference-mode prediction at one shared step.
    pub fn predict_noise(
        &self,
        z_t: &Tensor<T>,
        t: usize,
        cond: &Conditioning<T>,
        env: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        let z = tape.constant(z_t.clone());
        let e = env.map(|e| tape.constant(e.clone()));
        let ts = vec![t; z_t.dims()[0]];
        let y = self.forward(&mut tape, &p, z, &ts, cond, e)?;
        Ok(tape.value(y).clone())
    }

    /// Classifier-free guided prediction.
    ///
    /// Guidance extrapolates along the prompt condition only. Environment
    /// tokens add their unscaled effect on the unconditional branch,
    /// `e(null, env) - e(null)`, where the partner is the sole source of
    /// information, so an inert environment sublayer leaves plain guidance.
    /// An all-null condition needs a single pass.
    pub fn guided_noise(
        &self,
        z_t: &Tensor<T>,
        t: usize,
        cond: &Conditioning<T>,
        env: Option<&Tensor<T>>,
        scale: f64,
    ) -> Result<Tensor<T>> {
        if cond.null.iter().all(|&n| n) {
            return self.predict_noise(z_t, t, cond, env);
        }
        let c = self.predict_noise(z_t, t, cond, None)?;
        let null = Conditioning::null(cond.batch());
        let needs_u = scale != 1.0 || env.is_some();
        let u = if needs_u { Some(self.predict_noise(z_t, t, &null, None)?) } else { None };
        let guided = match &u {
            Some(u) if scale != 1.0 => cfg_combine(u, &c, scale)?,
            _ => c,
        };
        match (env, u) {
            (Some(e), Some(u)) => {
                let ue = self.predict_noise(z_t, t, &null, Some(e))?;
                let delta = ue.zip_map(&u, "guided_noise", |a, b| a - b)?;
                guided.zip_map(&delta, "guided_noise", |g, d| g + d)
            }
            _ => Ok(guided),
        }
    }

    /// Draw `cond.batch()` latents with a single-modality reverse chain.
    pub fn sample(
        &self,
        cond: &Conditioning<T>,
        sched: &VarianceSchedule,
        sampler: Sampler,
        guidance: f64,
        rng: &mut SeededRng,
    ) -> Result<Tensor<T>> {
        let start = rng.normal_tensor(&batched(cond.batch(), latent_dims(self.modality)));
        sample_loop(sched, sampler, start, rng, |z, t| self.guided_noise(z, t, cond, None, guidance))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LdmConfig {
    pub steps: usize,
    pub batch: usize,
    pub cond_dropout: f64,
    pub adam: AdamConfig,
}

/// Prompt modalities used to condition each target modality during training.
pub fn default_prompt_sources(target: Modality) -> Vec<Modality> {
    match target {
        Modality::Text => vec![Modality::Image, Modality::Audio, Modality::Video],
        _ => vec![Modality::Text],
    }
}

/// Train one denoiser on paired (prompt, target) draws from the world.
#[allow(clippy::too_many_arguments)]
pub fn train_ldm<T: Scalar>(
    net: &mut Denoiser<T>,
    codec: &Codec<T>,
    encoders: &PromptEncoders<T>,
    prompts: &[Modality],
    policy: &PairingPolicy,
    sched: &VarianceSchedule,
    config: LdmConfig,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let target = net.modality;
    if codec.modality != target {
        return Err(Error::ModalityMismatch {
            expected: target,
            actual: codec.modality,
        });
    }
    if prompts.is_empty() {
        return Err(Error::InvalidArgument(format!("no prompt modality for the {target} denoiser")));
    }
    for &m in prompts {
        policy.check(m, target)?;
    }
    let layout = net.layout();
    train_steps(&mut [&mut net.params], config.adam, config.steps, |tape, bounds, _| {
        let src = prompts[rng.below(prompts.len())];
        let pairs = make_batch(policy, (src, target), config.batch, rng)?;
        let prompt = encoders.get(src).encode(&pairs.iter().map(|p| &p.0).collect::<Vec<_>>())?;
        let z0 = codec.encode(&pairs.iter().map(|p| &p.1).collect::<Vec<_>>())?;
        let null = (0..config.batch).map(|_| rng.uniform() < config.cond_dropout).collect();
        let cond = Conditioning { vectors: prompt, null };
        denoising_loss(tape, &z0, sched, rng, |tape, z, ts| layout.forward(tape, &bounds[0], z, ts, &cond, None))
    })
}
