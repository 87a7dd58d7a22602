//! Prompt encoders into one shared conditioning space, contrastive bridging
//! alignment with text as the hub, and weighted composition of embeddings.

use crate::codecs::{positional_ids, stack_payloads};
use crate::error::{Error, Result};
use crate::nn::{train_steps, AdamConfig, Bound, Linear, ParamSet};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::world::{make_batch, render, Concept, Modality, PairingPolicy, Sample, NUM_CLASSES, TEXT_LEN, VIDEO_FRAMES, VOCAB};

pub const EMBED_DIM: usize = 16;
pub const TEMPERATURE: f64 = 0.07;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
enum Input {
    Dense,
    Tokens { table: usize },
    Frames,
}

/// Two dense layers from a payload batch to `out_dim` features. Text pools
/// position-aware token embeddings; video mean-pools per-frame features.
#[derive(Clone, Debug)]
pub struct PayloadNet<T> {
    pub modality: Modality,
    input: Input,
    fc1: Linear,
    fc2: Linear,
    pub params: ParamSet<T>,
}

impl<T: Scalar> PayloadNet<T> {
    pub fn new(modality: Modality, hidden: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let mut ps = ParamSet::new();
        let (input, in_dim) = match modality {
            Modality::Text => {
                let table = ps.add("embed", Tensor::from_fn(&[TEXT_LEN * VOCAB, hidden], |_| T::of(rng.normal())));
                (Input::Tokens { table }, hidden)
            }
            Modality::Video => (Input::Frames, modality.payload_len() / VIDEO_FRAMES),
            _ => (Input::Dense, modality.payload_len()),
        };
        let fc1 = Linear::new(&mut ps, "fc1", in_dim, hidden, rng);
        let fc2 = Linear::new(&mut ps, "fc2", hidden, out_dim, rng);
        Self {
            modality,
            input,
            fc1,
            fc2,
            params: ps,
        }
    }

    pub fn cast<U: Scalar>(&self) -> PayloadNet<U> {
        PayloadNet {
            modality: self.modality,
            input: self.input,
            fc1: self.fc1,
            fc2: self.fc2,
            params: self.params.cast(),
        }
    }

    /// Copy of the architecture without parameter values.
    pub fn layout(&self) -> PayloadNet<T> {
        PayloadNet {
            modality: self.modality,
            input: self.input,
            fc1: self.fc1,
            fc2: self.fc2,
            params: ParamSet::new(),
        }
    }

    /// `[B, out_dim]` features of a `[B] + payload_dims` batch.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, payload: &Tensor<T>) -> Result<Var> {
        let b = payload.dims()[0];
        let h = match self.input {
            Input::Tokens { table } => {
                let ids = positional_ids(payload)?;
                let e = tape.embedding_lookup(p.get(table), &ids)?;
                let width = tape.dims(e)[1];
                let e = tape.reshape(e, &[b, TEXT_LEN, width])?;
                let pooled = tape.mean_axis(e, 1)?;
                let h = self.fc1.forward(tape, p, pooled)?;
                tape.silu(h)
            }
            Input::Dense => {
                let x = tape.constant(payload.clone());
                let x = tape.reshape(x, &[b, payload.len() / b])?;
                let h = self.fc1.forward(tape, p, x)?;
                tape.silu(h)
            }
            Input::Frames => {
                let x = tape.constant(payload.clone());
                let x = tape.reshape(x, &[b, VIDEO_FRAMES, payload.len() / (b * VIDEO_FRAMES)])?;
                let h = self.fc1.forward(tape, p, x)?;
                let h = tape.silu(h);
                tape.mean_axis(h, 1)?
            }
        };
        self.fc2.forward(tape, p, h)
    }
}

/// A [`PayloadNet`] onto the unit sphere in `EMBED_DIM` dimensions.
#[derive(Clone, Debug)]
pub struct PromptEncoder<T> {
    pub net: PayloadNet<T>,
}

impl<T: Scalar> PromptEncoder<T> {
    pub fn new(modality: Modality, hidden: usize, rng: &mut SeededRng) -> Self {
        Self {
            net: PayloadNet::new(modality, hidden, EMBED_DIM, rng),
        }
    }

    pub fn modality(&self) -> Modality {
        self.net.modality
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.net.params
    }

    pub fn cast<U: Scalar>(&self) -> PromptEncoder<U> {
        PromptEncoder { net: self.net.cast() }
    }

    pub fn frozen(&self) -> bool {
        self.net.params.iter().all(|p| !p.trainable)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.net.params.set_all_trainable(!frozen);
    }

    /// Unit-norm `[B, EMBED_DIM]` embeddings of a payload batch.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, payload: &Tensor<T>) -> Result<Var> {
        let y = self.net.forward(tape, p, payload)?;
        Ok(tape.l2_normalize(y, T::of(NORM_EPS)))
    }

    pub fn encode(&self, samples: &[&Sample]) -> Result<Tensor<T>> {
        let x = stack_payloads(self.modality(), samples)?;
        self.encode_payload(&x)
    }

    pub fn encode_payload(&self, payload: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let p = self.net.params.bind(&mut tape);
        let y = self.forward(&mut tape, &p, payload)?;
        Ok(tape.value(y).clone())
    }

    pub fn encode_prompt(&self, sample: &Sample) -> Result<ConditionEmbedding> {
        let v = self.encode(&[sample])?;
        Ok(ConditionEmbedding {
            vector: v.data().iter().map(|x| x.as_f64()).collect(),
            provenance: vec![(self.modality(), 1.0)],
        })
    }
}

/// Unit vector in the shared space plus the modalities and weights it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    pub vector: Vec<f64>,
    pub provenance: Vec<(Modality, f64)>,
}

impl ConditionEmbedding {
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.vector.len()], |i| T::of(self.vector[i]))
    }
}

/// Weighted sum of embeddings, renormalised to unit length.
pub fn compose_condition(embeddings: &[ConditionEmbedding], weights: &[f64]) -> Result<ConditionEmbedding> {
    if embeddings.is_empty() || embeddings.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} embeddings with {} weights",
            embeddings.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::InvalidArgument("interpolation weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("interpolation weights sum to {total}, expected 1")));
    }
    let dim = embeddings[0].vector.len();
    if embeddings.iter().any(|e| e.vector.len() != dim) {
        return Err(Error::InvalidArgument("embeddings differ in width".into()));
    }
    let mut v = vec![0.0; dim];
    for (e, &w) in embeddings.iter().zip(weights) {
        v.iter_mut().zip(&e.vector).for_each(|(acc, x)| *acc += w * x);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::Domain {
            op: "compose_condition",
            msg: "weighted embeddings cancel to zero".into(),
        });
    }
    v.iter_mut().for_each(|x| *x /= norm);
    let provenance = embeddings
        .iter()
        .zip(weights)
        .flat_map(|(e, &w)| e.provenance.iter().map(move |&(m, pw)| (m, pw * w)))
        .collect();
    Ok(ConditionEmbedding { vector: v, provenance })
}

/// Symmetric InfoNCE over cosine-similarity logits scaled by `1/tau`; row `i`
/// of `a` pairs with row `i` of `b`.
pub fn infonce_loss<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, tau: f64) -> Result<Var> {
    let (da, db) = (tape.dims(a).to_vec(), tape.dims(b).to_vec());
    if da.len() != 2 || da != db {
        return Err(Error::ShapeMismatch {
            op: "infonce_loss",
            lhs: da,
            rhs: db,
        });
    }
    let n = da[0];
    if n == 0 {
        return Err(Error::InvalidArgument("infonce_loss needs at least one pair".into()));
    }
    let a = tape.l2_normalize(a, T::of(NORM_EPS));
    let b = tape.l2_normalize(b, T::of(NORM_EPS));
    let bt = tape.transpose(b)?;
    let sim = tape.matmul(a, bt)?;
    let logits = tape.scale(sim, T::of(1.0 / tau));
    let targets: Vec<usize> = (0..n).collect();
    let ab = tape.cross_entropy(logits, &targets)?;
    let lt = tape.transpose(logits)?;
    let ba = tape.cross_entropy(lt, &targets)?;
    let total = tape.add(ab, ba)?;
    Ok(tape.scale(total, T::of(0.5)))
}

/// One contrastive stage: align `pair` while only `trainable` encoders update.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignStage {
    pub pair: (Modality, Modality),
    pub trainable: Vec<Modality>,
}

/// Text-hub bridging: text+image jointly, then audio and video against frozen text.
pub fn default_align_stages() -> Vec<AlignStage> {
    use Modality::*;
    vec![
        AlignStage {
            pair: (Text, Image),
            trainable: vec![Text, Image],
        },
        AlignStage {
            pair: (Text, Audio),
            trainable: vec![Audio],
        },
        AlignStage {
            pair: (Text, Video),
            trainable: vec![Video],
        },
    ]
}

#[derive(Clone, Copy, Debug)]
pub struct AlignConfig {
    pub steps: usize,
    pub batch: usize,
    pub tau: f64,
    pub adam: AdamConfig,
}

/// One prompt encoder per modality, indexed by modality tag.
#[derive(Clone, Debug)]
pub struct PromptEncoders<T> {
    pub encoders: Vec<PromptEncoder<T>>,
}

impl<T: Scalar> PromptEncoders<T> {
    pub fn new(hidden: usize, rng: &mut SeededRng) -> Self {
        Self {
            encoders: Modality::ALL.iter().map(|&m| PromptEncoder::new(m, hidden, rng)).collect(),
        }
    }

    pub fn get(&self, m: Modality) -> &PromptEncoder<T> {
        &self.encoders[m.tag() as usize]
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut PromptEncoder<T> {
        &mut self.encoders[m.tag() as usize]
    }

    /// Run one contrastive stage. Encoders outside `stage.trainable` are frozen
    /// for the duration and left bit-identical.
    pub fn train_stage(
        &mut self,
        stage: &AlignStage,
        policy: &PairingPolicy,
        config: AlignConfig,
        rng: &mut SeededRng,
    ) -> Result<Vec<f64>> {
        let (ma, mb) = stage.pair;
        policy.check(ma, mb)?;
        if ma == mb {
            return Err(Error::InvalidArgument("alignment pair needs two distinct modalities".into()));
        }
        if let Some(m) = stage.trainable.iter().find(|m| **m != ma && **m != mb) {
            return Err(Error::InvalidArgument(format!("stage trains {m}, which is not part of its pair")));
        }
        let saved: Vec<bool> = self.encoders.iter().map(|e| !e.frozen()).collect();
        for m in [ma, mb] {
            self.get_mut(m).set_frozen(!stage.trainable.contains(&m));
        }
        let (ia, ib) = (ma.tag() as usize, mb.tag() as usize);
        let (ea, eb) = pair_mut(&mut self.encoders, ia, ib);
        let (la, lb) = (PromptEncoder { net: ea.net.layout() }, PromptEncoder { net: eb.net.layout() });
        let result = train_steps(&mut [&mut ea.net.params, &mut eb.net.params], config.adam, config.steps, |tape, bounds, _| {
            let batch = make_batch(policy, (ma, mb), config.batch, rng)?;
            let xa = stack_payloads(ma, &batch.iter().map(|p| &p.0).collect::<Vec<_>>())?;
            let xb = stack_payloads(mb, &batch.iter().map(|p| &p.1).collect::<Vec<_>>())?;
            let za = la.forward(tape, &bounds[0], &xa)?;
            let zb = lb.forward(tape, &bounds[1], &xb)?;
            infonce_loss(tape, za, zb, config.tau)
        });
        for (e, trainable) in self.encoders.iter_mut().zip(saved) {
            e.set_frozen(!trainable);
        }
        result
    }

    /// All stages in order, returning each stage's loss history.
    pub fn train_bridging(
        &mut self,
        stages: &[AlignStage],
        policy: &PairingPolicy,
        config: AlignConfig,
        rng: &mut SeededRng,
    ) -> Result<Vec<Vec<f64>>> {
        for s in stages {
            policy.check(s.pair.0, s.pair.1)?;
        }
        stages.iter().map(|s| self.train_stage(s, policy, config, rng)).collect()
    }
}

pub(crate) fn pair_mut<X>(items: &mut [X], i: usize, j: usize) -> (&mut X, &mut X) {
    assert_ne!(i, j);
    if i < j {
        let (lo, hi) = items.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = items.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

/// Eight concepts covering every class once, in random order with random styles.
pub fn class_round(rng: &mut SeededRng) -> Vec<Concept> {
    let mut classes: Vec<usize> = (0..NUM_CLASSES).collect();
    rng.shuffle(&mut classes);
    classes
        .into_iter()
        .map(|c| Concept::new(c, rng.uniform() as f32 as f64).expect("valid class"))
        .collect()
}

/// Top-1 retrieval accuracy over `rounds` held-out 8-way batches, averaged
/// over both directions. Each batch holds one concept per class.
pub fn retrieval_top1<T: Scalar>(
    enc_a: &PromptEncoder<T>,
    enc_b: &PromptEncoder<T>,
    rounds: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    let mut hits = 0usize;
    for _ in 0..rounds {
        let concepts = class_round(rng);
        let sa: Vec<Sample> = concepts.iter().map(|&c| render(c, enc_a.modality(), rng)).collect();
        let sb: Vec<Sample> = concepts.iter().map(|&c| render(c, enc_b.modality(), rng)).collect();
        let ea = enc_a.encode(&sa.iter().collect::<Vec<_>>())?;
        let eb = enc_b.encode(&sb.iter().collect::<Vec<_>>())?;
        let n = concepts.len();
        let sim = |i: usize, j: usize| -> f64 {
            (0..EMBED_DIM)
                .map(|d| ea.data()[i * EMBED_DIM + d].as_f64() * eb.data()[j * EMBED_DIM + d].as_f64())
                .sum()
        };
        let argmax = |f: &dyn Fn(usize) -> f64| (0..n).fold(0, |b, k| if f(k) > f(b) { k } else { b });
        for i in 0..n {
            hits += (argmax(&|j| sim(i, j)) == i) as usize;
            hits += (argmax(&|j| sim(j, i)) == i) as usize;
        }
    }
    Ok(hits as f64 / (2 * rounds * NUM_CLASSES) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::make_samples;

    fn unit(i: usize) -> ConditionEmbedding {
        let mut v = vec![0.0; EMBED_DIM];
        v[i] = 1.0;
        ConditionEmbedding {
            vector: v,
            provenance: vec![(Modality::Text, 1.0)],
        }
    }

    #[test]
    fn encoders_emit_unit_vectors_deterministically() {
        let mut rng = SeededRng::new(1);
        let encs = PromptEncoders::<f32>::new(32, &mut rng);
        for m in Modality::ALL {
            let s = make_samples(m, 6, &mut rng);
            let refs: Vec<&Sample> = s.iter().collect();
            let e = encs.get(m).encode(&refs).unwrap();
            for row in e.data().chunks(EMBED_DIM) {
                let n: f64 = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
            assert!(encs.get(m).encode(&refs).unwrap().bit_eq(&e));
        }
        let audio = make_samples(Modality::Audio, 1, &mut rng);
        assert!(matches!(
            encs.get(Modality::Image).encode(&[&audio[0]]),
            Err(Error::ModalityMismatch { .. })
        ));
    }

    #[test]
    fn infonce_reference_values() {
        let mut tape = Tape::<f64>::new();
        let one = tape.constant(Tensor::new(vec![1, 4], vec![0.5, 0.5, 0.5, 0.5]).unwrap());
        let l = infonce_loss(&mut tape, one, one, TEMPERATURE).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-12);

        let same = tape.constant(Tensor::from_fn(&[4, 3], |i| [0.6, 0.0, 0.8][i % 3]));
        let l = infonce_loss(&mut tape, same, same, TEMPERATURE).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-9);

        let eye = tape.constant(Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }));
        let l = infonce_loss(&mut tape, eye, eye, TEMPERATURE).unwrap();
        let v = tape.value(l).data()[0];
        let oracle = (1.0 + 3.0 * (-1.0 / TEMPERATURE).exp()).ln();
        assert!(v < 1e-3 && (v - oracle).abs() < 1e-9, "{v}");

        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(infonce_loss(&mut tape, a, b, TEMPERATURE).is_err());
    }

    #[test]
    fn compose_examples() {
        let e = unit(3);
        assert_eq!(compose_condition(&[e.clone()], &[1.0]).unwrap().vector, e.vector);
        let c = compose_condition(&[e.clone(), e.clone()], &[0.5, 0.5]).unwrap();
        assert!(c.vector.iter().zip(&e.vector).all(|(a, b)| (a - b).abs() < 1e-15));
        let c = compose_condition(&[unit(0), unit(1)], &[0.5, 0.5]).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((c.vector[0] - r).abs() < 1e-15 && (c.vector[1] - r).abs() < 1e-15);
        assert!(c.vector[2..].iter().all(|&x| x == 0.0));
        assert_eq!(c.provenance.len(), 2);
        assert!(compose_condition(&[unit(0), unit(1)], &[0.5, 0.6]).is_err());
        assert!(compose_condition(&[unit(0), unit(1)], &[1.5, -0.5]).is_err());
        assert!(compose_condition(&[unit(0)], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn disallowed_stage_is_rejected() {
        let mut rng = SeededRng::new(2);
        let mut encs = PromptEncoders::<f32>::new(16, &mut rng);
        let stage = AlignStage {
            pair: (Modality::Image, Modality::Audio),
            trainable: vec![Modality::Audio],
        };
        let cfg = AlignConfig {
            steps: 1,
            batch: 4,
            tau: TEMPERATURE,
            adam: AdamConfig::default(),
        };
        let err = encs.train_bridging(&[stage], &PairingPolicy::default(), cfg, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Policy(_)));
    }

    #[test]
    fn frozen_encoders_do_not_move() {
        let mut rng = SeededRng::new(3);
        let mut encs = PromptEncoders::<f32>::new(16, &mut rng);
        let before = encs.clone();
        let cfg = AlignConfig {
            steps: 5,
            batch: 8,
            tau: TEMPERATURE,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
        };
        let stages = default_align_stages();
        encs.train_stage(&stages[1], &PairingPolicy::default(), cfg, &mut rng).unwrap();
        assert!(encs.get(Modality::Text).params().bit_eq(before.get(Modality::Text).params()));
        assert!(!encs.get(Modality::Audio).params().bit_eq(before.get(Modality::Audio).params()));
        assert!(encs.get(Modality::Image).params().bit_eq(before.get(Modality::Image).params()));
        assert!(!encs.get(Modality::Text).frozen());
    }
}
