//! Per-modality deterministic autoencoders between payloads and 16-wide latents.
//!
//! Image and audio use dense encoders/decoders; video applies its own
//! image-style pair framewise, giving one latent row per frame. Text embeds
//! each `(position, token)` pair, mean-pools and projects, and decodes to
//! per-position logits. Encoded latents are standardised per dimension with
//! statistics fitted after training, so diffusion sees roughly unit scale.

use crate::error::{Error, Result};
use crate::nn::{smooth, train_steps, AdamConfig, Bound, Mlp, ParamSet};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::world::{Modality, Sample, TEXT_LEN, VIDEO_FRAMES, VOCAB};

pub const LATENT_WIDTH: usize = 16;

/// Latent shape for one sample (no batch axis).
pub fn latent_dims(m: Modality) -> &'static [usize] {
    match m {
        Modality::Video => &[VIDEO_FRAMES, LATENT_WIDTH],
        _ => &[LATENT_WIDTH],
    }
}

pub fn latent_len(m: Modality) -> usize {
    latent_dims(m).iter().product()
}

/// `[batch] + dims`.
pub fn batched(batch: usize, dims: &[usize]) -> Vec<usize> {
    std::iter::once(batch).chain(dims.iter().copied()).collect()
}

/// Real-valued width of one payload; text counts one-hot token positions.
pub fn payload_width(m: Modality) -> usize {
    match m {
        Modality::Text => TEXT_LEN * VOCAB,
        _ => m.payload_len(),
    }
}

/// Stack sample payloads into `[B] + payload_dims`, checking the modality.
pub fn stack_payloads<T: Scalar>(modality: Modality, samples: &[&Sample]) -> Result<Tensor<T>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty sample batch".into()));
    }
    let mut data = Vec::with_capacity(samples.len() * modality.payload_len());
    for s in samples {
        if s.modality != modality {
            return Err(Error::ModalityMismatch {
                expected: modality,
                actual: s.modality,
            });
        }
        data.extend(s.payload.data().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(batched(samples.len(), modality.payload_dims()), data)
}

/// Token ids `pos * VOCAB + tok` for a `[B, TEXT_LEN]` payload batch.
pub(crate) fn positional_ids<T: Scalar>(payload: &Tensor<T>) -> Result<Vec<usize>> {
    payload
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let tok = v.as_f64();
            if tok < 0.0 || tok >= VOCAB as f64 || tok.fract() != 0.0 {
                return Err(Error::InvalidArgument(format!("token {tok} outside vocabulary 0..{VOCAB}")));
            }
            Ok((i % TEXT_LEN) * VOCAB + tok as usize)
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
enum Arch {
    Dense { enc: Mlp, dec: Mlp, out: Squash },
    Text { table: usize, enc: Mlp, dec: Mlp },
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Squash {
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug)]
pub struct CodecConfig {
    pub hidden: usize,
    pub text_embed: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            text_embed: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Codec<T> {
    pub modality: Modality,
    arch: Arch,
    shift: usize,
    scale: usize,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Codec<T> {
    pub fn new(modality: Modality, config: CodecConfig, rng: &mut SeededRng) -> Self {
        let mut ps = ParamSet::new();
        let h = config.hidden;
        let arch = match modality {
            Modality::Text => {
                let e = config.text_embed;
                let table = ps.add(
                    "embed",
                    Tensor::from_fn(&[TEXT_LEN * VOCAB, e], |_| T::of(rng.normal())),
                );
                Arch::Text {
                    table,
                    enc: Mlp::new(&mut ps, "enc", [e, h, LATENT_WIDTH], rng),
                    dec: Mlp::new(&mut ps, "dec", [LATENT_WIDTH, h, TEXT_LEN * VOCAB], rng),
                }
            }
            _ => {
                let frame = match modality {
                    Modality::Video => modality.payload_len() / VIDEO_FRAMES,
                    _ => modality.payload_len(),
                };
                Arch::Dense {
                    enc: Mlp::new(&mut ps, "enc", [frame, h, LATENT_WIDTH], rng),
                    dec: Mlp::new(&mut ps, "dec", [LATENT_WIDTH, h, frame], rng),
                    out: if modality == Modality::Audio { Squash::Tanh } else { Squash::Sigmoid },
                }
            }
        };
        let shift = ps.add("latent.shift", Tensor::zeros(&[LATENT_WIDTH]));
        let scale = ps.add("latent.scale", Tensor::filled(&[LATENT_WIDTH], T::one()));
        let mut codec = Self {
            modality,
            arch,
            shift,
            scale,
            params: ps,
        };
        codec.freeze_stats();
        codec
    }

    fn freeze_stats(&mut self) {
        self.params.set_trainable("latent.", false);
    }

    pub fn cast<U: Scalar>(&self) -> Codec<U> {
        Codec {
            modality: self.modality,
            arch: self.arch,
            shift: self.shift,
            scale: self.scale,
            params: self.params.cast(),
        }
    }

    /// Unstandardised latent of a `[B] + payload_dims` batch on the tape.
    pub fn encode_raw(&self, tape: &mut Tape<T>, p: &Bound, payload: &Tensor<T>) -> Result<Var> {
        let b = payload.dims()[0];
        match self.arch {
            Arch::Text { table, enc, .. } => {
                let ids = positional_ids(payload)?;
                let e = tape.embedding_lookup(p.get(table), &ids)?;
                let width = tape.dims(e)[1];
                let e = tape.reshape(e, &[b, TEXT_LEN, width])?;
                let pooled = tape.mean_axis(e, 1)?;
                enc.forward(tape, p, pooled)
            }
            Arch::Dense { enc, .. } => {
                let x = tape.constant(payload.clone());
                let x = match self.modality {
                    Modality::Video => tape.reshape(x, &[b, VIDEO_FRAMES, payload.len() / (b * VIDEO_FRAMES)])?,
                    _ => tape.reshape(x, &[b, payload.len() / b])?,
                };
                enc.forward(tape, p, x)
            }
        }
    }

    /// Decoder output from an unstandardised latent: squashed payload for dense
    /// codecs, `[B * TEXT_LEN, VOCAB]` logits for text.
    pub fn decode_raw(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
        let b = tape.dims(z)[0];
        match self.arch {
            Arch::Text { dec, .. } => {
                let logits = dec.forward(tape, p, z)?;
                tape.reshape(logits, &[b * TEXT_LEN, VOCAB])
            }
            Arch::Dense { dec, out, .. } => {
                let y = dec.forward(tape, p, z)?;
                let y = match out {
                    Squash::Sigmoid => tape.sigmoid(y),
                    Squash::Tanh => tape.tanh(y),
                };
                tape.reshape(y, &batched(b, self.modality.payload_dims()))
            }
        }
    }

    /// Reconstruction loss: squared error, or token cross-entropy for text.
    pub fn recon_loss(&self, tape: &mut Tape<T>, p: &Bound, payload: &Tensor<T>) -> Result<Var> {
        let z = self.encode_raw(tape, p, payload)?;
        let y = self.decode_raw(tape, p, z)?;
        match self.arch {
            Arch::Text { .. } => {
                let targets: Vec<usize> = payload.data().iter().map(|v| v.as_f64() as usize).collect();
                tape.cross_entropy(y, &targets)
            }
            Arch::Dense { .. } => {
                let x = tape.constant(payload.clone());
                tape.mse(y, x)
            }
        }
    }

    fn stats(&self) -> (Vec<T>, Vec<T>) {
        (
            self.params.get(self.shift).value.data().to_vec(),
            self.params.get(self.scale).value.data().to_vec(),
        )
    }

    /// Standardised latents `[B] + latent_dims` for a payload batch.
    pub fn encode_payload(&self, payload: &Tensor<T>) -> Result<Tensor<T>> {
        if &payload.dims()[1..] != self.modality.payload_dims() {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: payload.dims().to_vec(),
                rhs: batched(payload.dims()[0], self.modality.payload_dims()),
            });
        }
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        let z = self.encode_raw(&mut tape, &p, payload)?;
        let (shift, scale) = self.stats();
        let raw = tape.value(z);
        Ok(Tensor::from_fn(raw.dims(), |i| {
            let d = i % LATENT_WIDTH;
            (raw.data()[i] - shift[d]) / scale[d]
        }))
    }

    pub fn encode(&self, samples: &[&Sample]) -> Result<Tensor<T>> {
        self.encode_payload(&stack_payloads(self.modality, samples)?)
    }

    /// Payload batch from standardised latents; text returns argmax token ids.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let want = latent_dims(self.modality);
        if z.rank() < 2 || &z.dims()[1..] != want {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: z.dims().to_vec(),
                rhs: batched(z.dims()[0], want),
            });
        }
        let (shift, scale) = self.stats();
        let raw = Tensor::from_fn(z.dims(), |i| {
            let d = i % LATENT_WIDTH;
            z.data()[i] * scale[d] + shift[d]
        });
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        let zv = tape.constant(raw);
        let y = self.decode_raw(&mut tape, &p, zv)?;
        let y = tape.value(y);
        match self.arch {
            Arch::Text { .. } => {
                let ids: Vec<T> = y
                    .data()
                    .chunks_exact(VOCAB)
                    .map(|row| {
                        let best = (0..VOCAB).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                        T::of(best as f64)
                    })
                    .collect();
                Tensor::new(batched(z.dims()[0], self.modality.payload_dims()), ids)
            }
            Arch::Dense { .. } => Ok(y.clone()),
        }
    }

    /// Minimise reconstruction loss on minibatches drawn from `samples`.
    pub fn train(
        &mut self,
        samples: &[Sample],
        steps: usize,
        batch: usize,
        config: AdamConfig,
        rng: &mut SeededRng,
    ) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("cannot train a codec on an empty dataset".into()));
        }
        let modality = self.modality;
        if let Some(s) = samples.iter().find(|s| s.modality != modality) {
            return Err(Error::ModalityMismatch {
                expected: modality,
                actual: s.modality,
            });
        }
        let this = self.clone_layout();
        train_steps(&mut [&mut self.params], config, steps, |tape, bounds, _| {
            let picked: Vec<&Sample> = (0..batch).map(|_| &samples[rng.below(samples.len())]).collect();
            let x = stack_payloads(modality, &picked)?;
            this.recon_loss(tape, &bounds[0], &x)
        })
    }

    /// Parameter-free copy used inside training closures.
    fn clone_layout(&self) -> Codec<T> {
        Codec {
            modality: self.modality,
            arch: self.arch,
            shift: self.shift,
            scale: self.scale,
            params: ParamSet::new(),
        }
    }

    /// Set the latent shift/scale to the per-dimension mean/std over `samples`.
    pub fn fit_latent_stats(&mut self, samples: &[&Sample]) -> Result<()> {
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        let x = stack_payloads::<T>(self.modality, samples)?;
        let z = self.encode_raw(&mut tape, &p, &x)?;
        let raw = tape.value(z).data();
        let rows = raw.len() / LATENT_WIDTH;
        let mut mean = [0.0f64; LATENT_WIDTH];
        let mut var = [0.0f64; LATENT_WIDTH];
        for r in raw.chunks_exact(LATENT_WIDTH) {
            r.iter().enumerate().for_each(|(d, v)| mean[d] += v.as_f64() / rows as f64);
        }
        for r in raw.chunks_exact(LATENT_WIDTH) {
            r.iter().enumerate().for_each(|(d, v)| var[d] += (v.as_f64() - mean[d]).powi(2) / rows as f64);
        }
        *self.params.value_mut(self.shift) = Tensor::from_fn(&[LATENT_WIDTH], |d| T::of(mean[d]));
        *self.params.value_mut(self.scale) = Tensor::from_fn(&[LATENT_WIDTH], |d| T::of(var[d].sqrt().max(1e-3)));
        Ok(())
    }
}

/// RMS reconstruction error for dense modalities, token accuracy for text.
pub fn reconstruction_score(codec: &Codec<f32>, samples: &[&Sample]) -> Result<f64> {
    let x = stack_payloads::<f32>(codec.modality, samples)?;
    let y = codec.decode(&codec.encode_payload(&x)?)?;
    let n = x.len() as f64;
    Ok(match codec.modality {
        Modality::Text => x.data().iter().zip(y.data()).filter(|(a, b)| a == b).count() as f64 / n,
        _ => (x.data().iter().zip(y.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / n).sqrt(),
    })
}

/// True when the 50-step smoothed history never increases by more than `slack`
/// (relative) from one window to the next.
pub fn smoothed_non_increasing(history: &[f64], window: usize, slack: f64) -> bool {
    smooth(history, window).windows(2).all(|w| w[1] <= w[0] * (1.0 + slack))
}
