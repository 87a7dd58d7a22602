//! Environment encoders, the cross-modal attention objective, staged joint
//! training and synchronized multi-output sampling.

use std::collections::BTreeMap;

use crate::alignment::{compose_condition, infonce_loss, ConditionEmbedding, PromptEncoders};
use crate::codecs::{batched, latent_dims, Codec, LATENT_WIDTH};
use crate::denoiser::{default_prompt_sources, Conditioning, Denoiser, CONTEXT_WIDTH};
use crate::diffusion::{forward_diffuse_rows, Sampler, VarianceSchedule};
use crate::error::{Error, Result};
use crate::nn::{train_steps, AdamConfig, Bound, Linear, ParamSet};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::world::{make_batch, render, Modality, PairingPolicy, Sample};

/// Environment tokens emitted per modality.
pub const ENV_TOKENS: usize = 2;
/// Weight of the latent contrastive term in a joint stage objective. Image
/// never trains against audio or video, so those pairs couple only through
/// aligned environment spaces; 0.1 left them too loosely aligned.
pub const CONTRASTIVE_WEIGHT: f64 = 0.3;
/// InfoNCE temperature between environment tokens. Softer than the prompt
/// alignment temperature: it pulls paired tokens together in absolute terms
/// instead of only ranking them.
pub const ENV_TEMPERATURE: f64 = 0.5;
/// Hidden width of the environment encoder map.
pub const ENV_HIDDEN: usize = 256;

/// `V_m`: maps a noisy latent to unit-norm tokens in the shared space.
///
/// The map is odd (bias-free, tanh hidden layer), so every modality sends
/// pure noise to tokens with zero mean direction.
#[derive(Clone, Debug)]
pub struct EnvironmentEncoder<T> {
    pub modality: Modality,
    fc1: Linear,
    fc2: Linear,
    pub params: ParamSet<T>,
}

impl<T: Scalar> EnvironmentEncoder<T> {
    pub fn new(modality: Modality, hidden: usize, rng: &mut SeededRng) -> Self {
        let mut params = ParamSet::new();
        let fc1 = Linear::without_bias(&mut params, "map.fc1", LATENT_WIDTH, hidden, rng);
        let fc2 = Linear::without_bias(&mut params, "map.fc2", hidden, ENV_TOKENS * CONTEXT_WIDTH, rng);
        Self {
            modality,
            fc1,
            fc2,
            params,
        }
    }

    pub fn cast<U: Scalar>(&self) -> EnvironmentEncoder<U> {
        EnvironmentEncoder {
            modality: self.modality,
            fc1: self.fc1,
            fc2: self.fc2,
            params: self.params.cast(),
        }
    }

    pub fn frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.set_all_trainable(!frozen);
    }

    /// `[B] + latent_dims` to `[B, 2, 16]`; video frames are mean-pooled first.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, z_t: Var) -> Result<Var> {
        let zd = tape.dims(z_t).to_vec();
        let b = zd[0];
        if zd[1..] != *latent_dims(self.modality) {
            return Err(Error::ShapeMismatch {
                op: "env_encode",
                lhs: zd,
                rhs: batched(b, latent_dims(self.modality)),
            });
        }
        let pooled = if zd.len() == 3 { tape.mean_axis(z_t, 1)? } else { z_t };
        let h = self.fc1.forward(tape, p, pooled)?;
        let h = tape.tanh(h);
        let y = self.fc2.forward(tape, p, h)?;
        let y = tape.reshape(y, &[b, ENV_TOKENS, CONTEXT_WIDTH])?;
        Ok(tape.l2_normalize(y, T::of(1e-12)))
    }

    pub fn encode(&self, z_t: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        let z = tape.constant(z_t.clone());
        let y = self.forward(&mut tape, &p, z)?;
        Ok(tape.value(y).clone())
    }
}

/// Paired latents noised at shared steps with independent noises.
#[derive(Clone, Debug)]
pub struct NoisedPair<T> {
    pub ts: Vec<usize>,
    pub eps_a: Tensor<T>,
    pub z_t_a: Tensor<T>,
    pub eps_b: Tensor<T>,
    pub z_t_b: Tensor<T>,
}

impl<T: Scalar> NoisedPair<T> {
    pub fn draw(z0_a: &Tensor<T>, z0_b: &Tensor<T>, sched: &VarianceSchedule, rng: &mut SeededRng) -> Result<Self> {
        let n = z0_a.dims()[0];
        if z0_b.dims()[0] != n || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "paired batches must be non-empty and equal in size, got {n} and {}",
                z0_b.dims()[0]
            )));
        }
        let ts: Vec<usize> = (0..n).map(|_| sched.sample_step(rng)).collect();
        let eps_a = rng.normal_tensor(z0_a.dims());
        let eps_b = rng.normal_tensor(z0_b.dims());
        Ok(Self {
            z_t_a: forward_diffuse_rows(z0_a, &ts, &eps_a, sched)?,
            z_t_b: forward_diffuse_rows(z0_b, &ts, &eps_b, sched)?,
            ts,
            eps_a,
            eps_b,
        })
    }
}

/// `|eps_A - net_A(z_t^A, env_B, t, cond)|²` for already-computed environment tokens.
#[allow(clippy::too_many_arguments)]
pub fn cross_term<T: Scalar>(
    tape: &mut Tape<T>,
    net_a: &Denoiser<T>,
    pa: &Bound,
    z_t_a: &Tensor<T>,
    eps_a: &Tensor<T>,
    ts: &[usize],
    cond: &Conditioning<T>,
    env_b: Var,
) -> Result<Var> {
    let z = tape.constant(z_t_a.clone());
    let pred = net_a.forward(tape, pa, z, ts, cond, Some(env_b))?;
    let target = tape.constant(eps_a.clone());
    tape.mse(pred, target)
}

/// `L_Cross` for `net_A` attending to `V_B(z_t^B)` on a fresh shared-step draw.
#[allow(clippy::too_many_arguments)]
pub fn cross_loss<T: Scalar>(
    tape: &mut Tape<T>,
    net_a: &Denoiser<T>,
    pa: &Bound,
    z0_a: &Tensor<T>,
    v_b: &EnvironmentEncoder<T>,
    pv: &Bound,
    z0_b: &Tensor<T>,
    cond: &Conditioning<T>,
    sched: &VarianceSchedule,
    rng: &mut SeededRng,
) -> Result<Var> {
    let draw = NoisedPair::draw(z0_a, z0_b, sched, rng)?;
    let zb = tape.constant(draw.z_t_b.clone());
    let env_b = v_b.forward(tape, pv, zb)?;
    cross_term(tape, net_a, pa, &draw.z_t_a, &draw.eps_a, &draw.ts, cond, env_b)
}

/// Symmetric InfoNCE over mean-pooled environment tokens `[B, 2, 16]`.
pub fn latent_contrastive_loss<T: Scalar>(tape: &mut Tape<T>, env_a: Var, env_b: Var, tau: f64) -> Result<Var> {
    let pa = tape.mean_axis(env_a, 1)?;
    let pb = tape.mean_axis(env_b, 1)?;
    infonce_loss(tape, pa, pb, tau)
}

/// A group of parameters that a joint stage may train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Component {
    /// The environment cross-attention sublayers of one denoiser.
    EnvAttention(Modality),
    /// One environment encoder.
    EnvEncoder(Modality),
}

impl Component {
    /// Does the qualified parameter name (see [`Models::named_params`]) belong here?
    pub fn covers(&self, name: &str) -> bool {
        match self {
            Component::EnvAttention(m) => name.starts_with(&format!("ldm.{m}.")) && Denoiser::<f32>::is_env_param(name),
            Component::EnvEncoder(m) => name.starts_with(&format!("env.{m}.")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointStage {
    pub pair: (Modality, Modality),
    pub trainable: Vec<Component>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stages: Vec<JointStage>,
}

impl Default for StagePlan {
    fn default() -> Self {
        use Component::*;
        use Modality::*;
        Self {
            stages: vec![
                JointStage {
                    pair: (Text, Image),
                    trainable: vec![EnvAttention(Text), EnvAttention(Image), EnvEncoder(Text), EnvEncoder(Image)],
                },
                JointStage {
                    pair: (Text, Audio),
                    trainable: vec![EnvAttention(Audio), EnvEncoder(Audio)],
                },
                JointStage {
                    pair: (Audio, Video),
                    trainable: vec![EnvAttention(Video), EnvEncoder(Video)],
                },
            ],
        }
    }
}

impl StagePlan {
    /// Every stage trains only its own pair, and every environment encoder is
    /// trainable in exactly one stage.
    pub fn validate(&self, policy: &PairingPolicy) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            policy.check(s.pair.0, s.pair.1)?;
            for c in &s.trainable {
                let m = match c {
                    Component::EnvAttention(m) | Component::EnvEncoder(m) => *m,
                };
                if m != s.pair.0 && m != s.pair.1 {
                    return Err(Error::InvalidArgument(format!("joint stage {} trains {m} outside its pair", i + 1)));
                }
            }
        }
        for m in Modality::ALL {
            let n = self
                .stages
                .iter()
                .filter(|s| s.trainable.contains(&Component::EnvEncoder(m)))
                .count();
            if n != 1 {
                return Err(Error::InvalidArgument(format!(
                    "the {m} environment encoder is trainable in {n} stages, expected exactly 1"
                )));
            }
        }
        Ok(())
    }
}

/// Every trained component needed for conditional and joint generation.
#[derive(Clone, Debug)]
pub struct Models<T> {
    pub sched: VarianceSchedule,
    pub codecs: Vec<Codec<T>>,
    pub prompts: PromptEncoders<T>,
    pub denoisers: Vec<Denoiser<T>>,
    pub env: Vec<EnvironmentEncoder<T>>,
}

impl<T: Scalar> Models<T> {
    pub fn codec(&self, m: Modality) -> &Codec<T> {
        &self.codecs[m.tag() as usize]
    }

    pub fn denoiser(&self, m: Modality) -> &Denoiser<T> {
        &self.denoisers[m.tag() as usize]
    }

    pub fn env_encoder(&self, m: Modality) -> &EnvironmentEncoder<T> {
        &self.env[m.tag() as usize]
    }

    /// Denoiser and environment-encoder parameters under qualified names
    /// `ldm.<modality>.<param>` and `env.<modality>.<param>`.
    pub fn named_params(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for d in &self.denoisers {
            for p in d.params.iter() {
                out.insert(format!("ldm.{}.{}", d.modality, p.name), p.value.clone());
            }
        }
        for v in &self.env {
            for p in v.params.iter() {
                out.insert(format!("env.{}.{}", v.modality, p.name), p.value.clone());
            }
        }
        out
    }

    /// Zero every environment output projection, leaving no coupling path.
    pub fn decouple(&mut self) {
        for d in &mut self.denoisers {
            d.zero_env_attention();
        }
    }

    /// Encode one prompt sample with its modality's prompt encoder.
    pub fn encode_prompt(&self, sample: &Sample) -> Result<ConditionEmbedding> {
        self.prompts.get(sample.modality).encode_prompt(sample)
    }
}

/// Qualified names whose values differ bitwise between two snapshots.
pub fn changed_params<T: Scalar>(before: &BTreeMap<String, Tensor<T>>, after: &BTreeMap<String, Tensor<T>>) -> Vec<String> {
    after
        .iter()
        .filter(|(k, v)| before.get(*k).is_none_or(|b| !b.bit_eq(v)))
        .map(|(k, _)| k.clone())
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct JointConfig {
    pub steps: usize,
    pub batch: usize,
    /// Probability that a chain's condition is replaced by the null token.
    pub cond_dropout: f64,
    pub contrastive_weight: f64,
    pub tau: f64,
    pub adam: AdamConfig,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch: 64,
            cond_dropout: 0.5,
            contrastive_weight: CONTRASTIVE_WEIGHT,
            tau: ENV_TEMPERATURE,
            adam: AdamConfig { lr: 3e-3, weight_decay: 0.0, ..AdamConfig::default() },
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub history: Vec<f64>,
    /// Qualified names of the parameters the stage modified.
    pub changed: Vec<String>,
    /// Qualified names the stage declared trainable.
    pub declared: Vec<String>,
}

fn pick_conditions<T: Scalar>(
    models: &Models<T>,
    target: Modality,
    pairs: &[(Sample, Sample)],
    pick: impl Fn(&(Sample, Sample)) -> crate::world::Concept,
    dropout: f64,
    rng: &mut SeededRng,
) -> Result<Conditioning<T>> {
    let sources = default_prompt_sources(target);
    let src = sources[rng.below(sources.len())];
    let prompts: Vec<Sample> = pairs.iter().map(|p| render(pick(p), src, rng)).collect();
    let vectors = models.prompts.get(src).encode(&prompts.iter().collect::<Vec<_>>())?;
    let null = (0..pairs.len()).map(|_| rng.uniform() < dropout).collect();
    Ok(Conditioning { vectors, null })
}

/// Train stage `index` of `plan`. Only the stage's declared components change.
pub fn train_joint_stage<T: Scalar>(
    models: &mut Models<T>,
    plan: &StagePlan,
    index: usize,
    policy: &PairingPolicy,
    config: JointConfig,
    rng: &mut SeededRng,
) -> Result<StageReport> {
    let stage = plan
        .stages
        .get(index)
        .ok_or_else(|| Error::InvalidArgument(format!("plan has {} stages, no stage {}", plan.stages.len(), index + 1)))?;
    let (ma, mb) = stage.pair;
    policy.check(ma, mb)?;
    if ma == mb {
        return Err(Error::InvalidArgument("a joint stage needs two distinct modalities".into()));
    }
    let before = models.named_params();
    let declared: Vec<String> = before
        .keys()
        .filter(|k| stage.trainable.iter().any(|c| c.covers(k)))
        .cloned()
        .collect();

    for d in &mut models.denoisers {
        let m = d.modality;
        d.set_trainable_groups(false, stage.trainable.contains(&Component::EnvAttention(m)));
    }
    for v in &mut models.env {
        let m = v.modality;
        v.set_frozen(!stage.trainable.contains(&Component::EnvEncoder(m)));
    }

    let (ia, ib) = (ma.tag() as usize, mb.tag() as usize);
    let (la, lb) = (models.denoisers[ia].layout(), models.denoisers[ib].layout());
    let (va, vb) = (models.env[ia].clone(), models.env[ib].clone());
    let snapshot = models.clone();
    let sched = models.sched.clone();
    let mut nets = models.denoisers.iter_mut().filter(|d| d.modality == ma || d.modality == mb).collect::<Vec<_>>();
    let mut envs = models.env.iter_mut().filter(|v| v.modality == ma || v.modality == mb).collect::<Vec<_>>();
    // Iteration order is by tag; map back to (a, b).
    let swap = ia > ib;
    let (na, nb) = {
        let (x, y) = nets.split_at_mut(1);
        if swap {
            (&mut y[0].params, &mut x[0].params)
        } else {
            (&mut x[0].params, &mut y[0].params)
        }
    };
    let (ea, eb) = {
        let (x, y) = envs.split_at_mut(1);
        if swap {
            (&mut y[0].params, &mut x[0].params)
        } else {
            (&mut x[0].params, &mut y[0].params)
        }
    };

    let history = train_steps(&mut [na, nb, ea, eb], config.adam, config.steps, |tape, bounds, _| {
        let pairs = make_batch(policy, (ma, mb), config.batch, rng)?;
        let z0_a = snapshot.codec(ma).encode(&pairs.iter().map(|p| &p.0).collect::<Vec<_>>())?;
        let z0_b = snapshot.codec(mb).encode(&pairs.iter().map(|p| &p.1).collect::<Vec<_>>())?;
        let cond_a = pick_conditions(&snapshot, ma, &pairs, |p| p.0.concept, config.cond_dropout, rng)?;
        let cond_b = pick_conditions(&snapshot, mb, &pairs, |p| p.1.concept, config.cond_dropout, rng)?;
        let draw = NoisedPair::draw(&z0_a, &z0_b, &sched, rng)?;
        let zta = tape.constant(draw.z_t_a.clone());
        let ztb = tape.constant(draw.z_t_b.clone());
        let env_a = va.forward(tape, &bounds[2], zta)?;
        let env_b = vb.forward(tape, &bounds[3], ztb)?;
        let la_loss = cross_term(tape, &la, &bounds[0], &draw.z_t_a, &draw.eps_a, &draw.ts, &cond_a, env_b)?;
        let lb_loss = cross_term(tape, &lb, &bounds[1], &draw.z_t_b, &draw.eps_b, &draw.ts, &cond_b, env_a)?;
        let con = latent_contrastive_loss(tape, env_a, env_b, config.tau)?;
        let con = tape.scale(con, T::of(config.contrastive_weight));
        let sum = tape.add(la_loss, lb_loss)?;
        tape.add(sum, con)
    })?;

    for d in &mut models.denoisers {
        d.params.set_all_trainable(true);
    }
    for v in &mut models.env {
        v.set_frozen(false);
    }
    let changed = changed_params(&before, &models.named_params());
    Ok(StageReport {
        history,
        changed,
        declared,
    })
}

/// Classifier-free guidance scale per output modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Guidance {
    pub text: f64,
    pub image: f64,
    pub audio: f64,
    pub video: f64,
}

impl Default for Guidance {
    /// 2.0 for text, image and video; 7.5 for audio.
    fn default() -> Self {
        Self {
            text: 2.0,
            image: 2.0,
            audio: 7.5,
            video: 2.0,
        }
    }
}

impl Guidance {
    pub fn uniform(scale: f64) -> Self {
        Self {
            text: scale,
            image: scale,
            audio: scale,
            video: scale,
        }
    }

    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Text => self.text,
            Modality::Image => self.image,
            Modality::Audio => self.audio,
            Modality::Video => self.video,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GenerationRequest {
    /// Prompt samples with interpolation weights; empty means unconditional.
    pub prompts: Vec<(Sample, f64)>,
    pub outputs: Vec<Modality>,
    pub sampler: Sampler,
    pub guidance: Guidance,
    pub seed: u64,
}

/// The random stream of one output chain.
pub fn chain_rng(seed: u64, m: Modality) -> SeededRng {
    SeededRng::derive(seed, &format!("chain.{m}"))
}

/// Elementwise mean of token sets `[B, Le, 16]`.
pub fn mean_tokens<T: Scalar>(sets: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = sets.first().ok_or_else(|| Error::InvalidArgument("no token sets to interpolate".into()))?;
    let mut acc = vec![0.0f64; first.len()];
    for s in sets {
        if s.dims() != first.dims() {
            return Err(Error::ShapeMismatch {
                op: "mean_tokens",
                lhs: first.dims().to_vec(),
                rhs: s.dims().to_vec(),
            });
        }
        for (a, v) in acc.iter_mut().zip(s.data()) {
            *a += v.as_f64();
        }
    }
    let n = sets.len() as f64;
    Tensor::new(first.dims().to_vec(), acc.into_iter().map(|a| T::of(a / n)).collect())
}

fn check_outputs(outputs: &[Modality]) -> Result<()> {
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("a generation request needs at least one output modality".into()));
    }
    for (i, m) in outputs.iter().enumerate() {
        if outputs[..i].contains(m) {
            return Err(Error::InvalidArgument(format!("output {m} requested twice")));
        }
    }
    Ok(())
}

/// Synchronized reverse chains, one per output, over a batch of conditions.
///
/// Every chain steps on the same grid; at each step chain `i` receives the
/// mean environment tokens of all other chains. `rngs[i]` drives chain `i`.
pub fn generate_latents<T: Scalar>(
    models: &Models<T>,
    cond: &Conditioning<T>,
    outputs: &[Modality],
    sampler: Sampler,
    guidance: Guidance,
    rngs: &mut [SeededRng],
) -> Result<Vec<Tensor<T>>> {
    check_outputs(outputs)?;
    assert_eq!(rngs.len(), outputs.len());
    let b = cond.batch();
    let mut zs: Vec<Tensor<T>> = outputs
        .iter()
        .zip(rngs.iter_mut())
        .map(|(m, r)| r.normal_tensor(&batched(b, latent_dims(*m))))
        .collect();
    let grid = sampler.grid(&models.sched)?;
    for &(t, t_prev) in &grid {
        let envs: Vec<Tensor<T>> = if outputs.len() > 1 {
            outputs
                .iter()
                .zip(&zs)
                .map(|(m, z)| models.env_encoder(*m).encode(z))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mut eps = Vec::with_capacity(outputs.len());
        for (i, m) in outputs.iter().enumerate() {
            let others: Vec<&Tensor<T>> = envs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, e)| e).collect();
            let env = if others.is_empty() { None } else { Some(mean_tokens(&others)?) };
            eps.push(models.denoiser(*m).guided_noise(&zs[i], t, cond, env.as_ref(), guidance.get(*m))?);
        }
        for (i, z) in zs.iter_mut().enumerate() {
            *z = sampler.step(z, t, t_prev, &eps[i], &models.sched, &mut rngs[i])?;
        }
    }
    Ok(zs)
}

/// Compose the request's prompts into one condition (null when there are none).
pub fn request_condition<T: Scalar>(models: &Models<T>, prompts: &[(Sample, f64)]) -> Result<Conditioning<T>> {
    if prompts.is_empty() {
        return Ok(Conditioning::null(1));
    }
    let embs = prompts.iter().map(|(s, _)| models.encode_prompt(s)).collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = prompts.iter().map(|p| p.1).collect();
    Ok(Conditioning::repeat(&compose_condition(&embs, &weights)?, 1))
}

/// Decoded samples from one synchronized run, in request order.
pub fn generate<T: Scalar>(request: &GenerationRequest, models: &Models<T>) -> Result<Vec<(Modality, Tensor<T>)>> {
    check_outputs(&request.outputs)?;
    let cond = request_condition(models, &request.prompts)?;
    let mut rngs: Vec<SeededRng> = request.outputs.iter().map(|m| chain_rng(request.seed, *m)).collect();
    let zs = generate_latents(models, &cond, &request.outputs, request.sampler, request.guidance, &mut rngs)?;
    request
        .outputs
        .iter()
        .zip(zs)
        .map(|(m, z)| Ok((*m, models.codec(*m).decode(&z)?)))
        .collect()
}
