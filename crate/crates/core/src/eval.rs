//! Oracle classifiers, the SIM coherence score, kernel MMD and report records.

use serde::{Deserialize, Serialize};

use crate::alignment::{compose_condition, PayloadNet, PromptEncoders};
use crate::codecs::stack_payloads;
use crate::denoiser::Conditioning;
use crate::diffusion::Sampler;
use crate::joint::{chain_rng, generate_latents, Guidance, Models};
use crate::error::{Error, Result};
use crate::nn::{train_steps, AdamConfig, Linear, ParamSet};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::{Tape, Tensor};
use crate::world::{make_samples, render, Concept, Modality, Sample, NUM_CLASSES};

/// Payload classifier recovering the generating class.
#[derive(Clone, Debug)]
pub struct OracleClassifier {
    pub net: PayloadNet<f32>,
    pub trained: bool,
}

impl OracleClassifier {
    pub fn new(modality: Modality, hidden: usize, rng: &mut SeededRng) -> Self {
        Self {
            net: PayloadNet::new(modality, hidden, NUM_CLASSES, rng),
            trained: false,
        }
    }

    pub fn modality(&self) -> Modality {
        self.net.modality
    }

    /// Cross-entropy training on fresh renders.
    pub fn train(&mut self, steps: usize, batch: usize, adam: AdamConfig, rng: &mut SeededRng) -> Result<Vec<f64>> {
        let m = self.modality();
        let layout = self.net.layout();
        let hist = train_steps(&mut [&mut self.net.params], adam, steps, |tape, bounds, _| {
            let samples = make_samples(m, batch, rng);
            let labels: Vec<usize> = samples.iter().map(|s| s.concept.class_id).collect();
            let x = stack_payloads(m, &samples.iter().collect::<Vec<_>>())?;
            let logits = layout.forward(tape, &bounds[0], &x)?;
            tape.cross_entropy(logits, &labels)
        })?;
        self.trained = true;
        Ok(hist)
    }

    /// Argmax class per row of a `[B] + payload_dims` batch.
    pub fn classify(&self, payload: &Tensor<f32>) -> Result<Vec<usize>> {
        if !self.trained {
            return Err(Error::InvalidArgument(format!("{} oracle has not been trained", self.modality())));
        }
        let mut tape = Tape::inference();
        let p = self.net.params.bind(&mut tape);
        let logits = self.net.forward(&mut tape, &p, payload)?;
        Ok(tape.value(logits).data().chunks_exact(NUM_CLASSES).map(argmax).collect())
    }

    pub fn classify_samples(&self, samples: &[&Sample]) -> Result<Vec<usize>> {
        self.classify(&stack_payloads(self.modality(), samples)?)
    }
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
}

/// Fraction of `predicted[i] == intended[i]`.
pub fn agreement(predicted: &[usize], intended: &[usize]) -> f64 {
    assert_eq!(predicted.len(), intended.len());
    if predicted.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(intended).filter(|(a, b)| a == b).count() as f64 / predicted.len() as f64
}

/// Oracle accuracy of a payload batch against intended classes.
pub fn oracle_accuracy(oracle: &OracleClassifier, payload: &Tensor<f32>, intended: &[usize]) -> Result<f64> {
    let pred = oracle.classify(payload)?;
    if pred.len() != intended.len() {
        return Err(Error::InvalidArgument(format!("{} payloads with {} labels", pred.len(), intended.len())));
    }
    Ok(agreement(&pred, intended))
}

/// One oracle per modality, indexed by tag.
#[derive(Clone, Debug)]
pub struct Oracles {
    pub oracles: Vec<OracleClassifier>,
}

impl Oracles {
    pub fn new(hidden: usize, rng: &mut SeededRng) -> Self {
        Self {
            oracles: Modality::ALL.iter().map(|&m| OracleClassifier::new(m, hidden, rng)).collect(),
        }
    }

    pub fn get(&self, m: Modality) -> &OracleClassifier {
        &self.oracles[m.tag() as usize]
    }

    pub fn train_all(&mut self, steps: usize, batch: usize, adam: AdamConfig, rng: &mut SeededRng) -> Result<()> {
        for o in &mut self.oracles {
            o.train(steps, batch, adam, rng)?;
        }
        Ok(())
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// `cos(C_A(a), C_B(b))` under the aligned prompt encoders.
pub fn sim_score(a: &Sample, b: &Sample, encoders: &PromptEncoders<f32>) -> Result<f64> {
    let ea = encoders.get(a.modality).encode(&[a])?;
    let eb = encoders.get(b.modality).encode(&[b])?;
    Ok(cosine(ea.data(), eb.data()))
}

/// Row-wise SIM for two payload batches of equal size.
pub fn sim_batch(
    encoders: &PromptEncoders<f32>,
    ma: Modality,
    a: &Tensor<f32>,
    mb: Modality,
    b: &Tensor<f32>,
) -> Result<Vec<f64>> {
    let ea = encoders.get(ma).encode_payload(a)?;
    let eb = encoders.get(mb).encode_payload(b)?;
    if ea.dims()[0] != eb.dims()[0] {
        return Err(Error::InvalidArgument("SIM needs equally sized batches".into()));
    }
    let w = ea.last_dim();
    Ok(ea.data().chunks_exact(w).zip(eb.data().chunks_exact(w)).map(|(x, y)| cosine(x, y)).collect())
}

fn flatten_set(samples: &[&Sample]) -> Result<(Modality, Vec<Vec<f64>>)> {
    let m = samples.first().ok_or_else(|| Error::InvalidArgument("empty sample set".into()))?.modality;
    let rows = samples
        .iter()
        .map(|s| {
            if s.modality != m {
                return Err(Error::ModalityMismatch {
                    expected: m,
                    actual: s.modality,
                });
            }
            Ok(s.payload.data().iter().map(|&v| v as f64).collect())
        })
        .collect::<Result<_>>()?;
    Ok((m, rows))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median of pooled pairwise squared distances.
pub fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    d.sort_by(|a, b| a.total_cmp(b));
    d.get(d.len() / 2).copied().unwrap_or(1.0).max(1e-12)
}

/// Gaussian-kernel MMD² between row sets, `k(a, b) = exp(-|a - b|² / h)`.
/// The unbiased form drops same-index terms from the within-set means.
pub fn mmd2_rows(x: &[Vec<f64>], y: &[Vec<f64>], h: f64, unbiased: bool) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::InvalidArgument("MMD needs at least two samples per set".into()));
    }
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / h).exp();
    let within = |s: &[Vec<f64>]| {
        let n = s.len();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j || !unbiased {
                    total += k(&s[i], &s[j]);
                }
            }
        }
        total / if unbiased { (n * (n - 1)) as f64 } else { (n * n) as f64 }
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += k(a, b);
        }
    }
    cross /= (x.len() * y.len()) as f64;
    Ok(within(x) + within(y) - 2.0 * cross)
}

/// Unbiased MMD² on flattened payloads; `bandwidth = None` uses the median heuristic.
pub fn mmd_score(x: &[&Sample], y: &[&Sample], bandwidth: Option<f64>) -> Result<f64> {
    let (mx, rx) = flatten_set(x)?;
    let (my, ry) = flatten_set(y)?;
    if mx != my {
        return Err(Error::ModalityMismatch {
            expected: mx,
            actual: my,
        });
    }
    let h = bandwidth.unwrap_or_else(|| median_bandwidth(&rx, &ry));
    mmd2_rows(&rx, &ry, h, true)
}

/// Held-out accuracy of a softmax-regression probe on `[N, d]` features.
pub fn linear_probe_accuracy(
    train_x: &Tensor<f32>,
    train_y: &[usize],
    test_x: &Tensor<f32>,
    test_y: &[usize],
    steps: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    let d = train_x.last_dim();
    let mut ps = ParamSet::<f32>::new();
    let lin = Linear::new(&mut ps, "probe", d, NUM_CLASSES, rng);
    let adam = AdamConfig {
        lr: 1e-2,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    train_steps(&mut [&mut ps], adam, steps, |tape, bounds, _| {
        let x = tape.constant(train_x.clone());
        let logits = lin.forward(tape, &bounds[0], x)?;
        tape.cross_entropy(logits, train_y)
    })?;
    let mut tape = Tape::inference();
    let p = ps.bind(&mut tape);
    let x = tape.constant(test_x.clone());
    let logits = lin.forward(&mut tape, &p, x)?;
    let pred: Vec<usize> = tape.value(logits).data().chunks_exact(NUM_CLASSES).map(argmax).collect();
    Ok(agreement(&pred, test_y))
}

/// One scored item of an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub metric: String,
    pub pair: String,
    pub prompt_id: Option<usize>,
    pub score: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metric: String,
    pub pair: String,
    pub seed: u64,
    pub config_hash: String,
    pub scores: Vec<f64>,
}

impl EvalReport {
    pub fn mean(&self) -> f64 {
        if self.scores.is_empty() {
            return f64::NAN;
        }
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    pub fn count(&self) -> usize {
        self.scores.len()
    }

    /// Per-prompt records followed by one aggregate record (`prompt_id = None`).
    pub fn records(&self) -> Vec<ScoreRecord> {
        let rec = |prompt_id, score| ScoreRecord {
            metric: self.metric.clone(),
            pair: self.pair.clone(),
            prompt_id,
            score,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
        };
        self.scores
            .iter()
            .enumerate()
            .map(|(i, &s)| rec(Some(i), s))
            .chain(std::iter::once(rec(None, self.mean())))
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.records()
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialise") + "\n")
            .collect()
    }
}

/// Parse report lines, refusing mixed config hashes unless `force` is set.
pub fn parse_records(text: &str, force: bool) -> Result<Vec<ScoreRecord>> {
    let records: Vec<ScoreRecord> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                offset: i,
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect::<Result<_>>()?;
    if !force {
        if let Some(first) = records.first() {
            if let Some(r) = records.iter().find(|r| r.config_hash != first.config_hash) {
                return Err(Error::InvalidArgument(format!(
                    "reports come from different configs ({} vs {}); pass force to compare anyway",
                    first.config_hash, r.config_hash
                )));
            }
        }
    }
    Ok(records)
}

/// A weighted set of prompt samples composed into one condition.
pub type Prompt = Vec<(Sample, f64)>;

/// `n` text prompts, each an equal blend of two renders from different classes.
///
/// A blended prompt leaves each output chain free to settle on either class,
/// so agreement between co-generated outputs is not forced by the prompt.
pub fn blended_text_prompts(n: usize, rng: &mut SeededRng) -> Vec<Prompt> {
    (0..n)
        .map(|_| {
            let a = Concept::random(rng);
            let mut b = Concept::random(rng);
            while b.class_id == a.class_id {
                b = Concept::random(rng);
            }
            vec![(render(a, Modality::Text, rng), 0.5), (render(b, Modality::Text, rng), 0.5)]
        })
        .collect()
}

/// Conditioning rows for a prompt list.
pub fn prompt_conditions(models: &Models<f32>, prompts: &[Prompt]) -> Result<Conditioning<f32>> {
    let mut data = Vec::with_capacity(prompts.len() * crate::alignment::EMBED_DIM);
    for p in prompts {
        let embs = p.iter().map(|(s, _)| models.encode_prompt(s)).collect::<Result<Vec<_>>>()?;
        let weights: Vec<f64> = p.iter().map(|x| x.1).collect();
        data.extend(compose_condition(&embs, &weights)?.vector.iter().map(|&v| v as f32));
    }
    Ok(Conditioning::rows(Tensor::new(vec![prompts.len(), crate::alignment::EMBED_DIM], data)?))
}

/// Outcome of one protocol (joint or independent) over a prompt set.
#[derive(Clone, Debug)]
pub struct PathScores {
    pub sim: Vec<f64>,
    /// Per prompt: 1 when the two oracles agree on the class, else 0.
    pub agreement: Vec<f64>,
    pub payloads: (Tensor<f32>, Tensor<f32>),
}

impl PathScores {
    pub fn mean_sim(&self) -> f64 {
        self.sim.iter().sum::<f64>() / self.sim.len().max(1) as f64
    }

    pub fn agreement_rate(&self) -> f64 {
        self.agreement.iter().sum::<f64>() / self.agreement.len().max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct JointComparison {
    pub pair: (Modality, Modality),
    pub joint: PathScores,
    pub independent: PathScores,
    /// Seed of the chain streams, shared by both paths.
    pub chain_seed: u64,
}

impl JointComparison {
    /// SIM reports for both paths, stamped with `config_hash`.
    pub fn reports(&self, config_hash: &str) -> [EvalReport; 2] {
        let pair = format!("{},{}", self.pair.0, self.pair.1);
        let mk = |metric: &str, seed, p: &PathScores| EvalReport {
            metric: metric.into(),
            pair: pair.clone(),
            seed,
            config_hash: config_hash.into(),
            scores: p.sim.clone(),
        };
        [
            mk("sim_joint", self.chain_seed, &self.joint),
            mk("sim_independent", self.chain_seed, &self.independent),
        ]
    }

    /// Oracle class-agreement reports for both paths.
    pub fn agreement_reports(&self, config_hash: &str) -> [EvalReport; 2] {
        let pair = format!("{},{}", self.pair.0, self.pair.1);
        let mk = |metric: &str, p: &PathScores| EvalReport {
            metric: metric.into(),
            pair: pair.clone(),
            seed: self.chain_seed,
            config_hash: config_hash.into(),
            scores: p.agreement.clone(),
        };
        [mk("agreement_joint", &self.joint), mk("agreement_independent", &self.independent)]
    }
}

fn score_path(
    models: &Models<f32>,
    oracles: &Oracles,
    pair: (Modality, Modality),
    za: &Tensor<f32>,
    zb: &Tensor<f32>,
) -> Result<PathScores> {
    let xa = models.codec(pair.0).decode(za)?;
    let xb = models.codec(pair.1).decode(zb)?;
    let sim = sim_batch(&models.prompts, pair.0, &xa, pair.1, &xb)?;
    let ca = oracles.get(pair.0).classify(&xa)?;
    let cb = oracles.get(pair.1).classify(&xb)?;
    let agreement = ca.iter().zip(&cb).map(|(a, b)| if a == b { 1.0 } else { 0.0 }).collect();
    Ok(PathScores {
        sim,
        agreement,
        payloads: (xa, xb),
    })
}

/// Generate `pair` for every prompt jointly and independently, and score both.
///
/// Both paths run on the same per-modality chain streams, so the only
/// difference between them is the coupling.
pub fn joint_vs_independent(
    models: &Models<f32>,
    oracles: &Oracles,
    prompts: &[Prompt],
    pair: (Modality, Modality),
    sampler: Sampler,
    guidance: Guidance,
    seed: u64,
) -> Result<JointComparison> {
    if pair.0 == pair.1 {
        return Err(Error::InvalidArgument(format!("cannot co-generate {} with itself", pair.0)));
    }
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("joint-vs-independent needs at least one prompt".into()));
    }
    let cond = prompt_conditions(models, prompts)?;
    let chain_seed = derive_seed(seed, "chains");
    let outputs = [pair.0, pair.1];

    let mut rngs: Vec<SeededRng> = outputs.iter().map(|m| chain_rng(chain_seed, *m)).collect();
    let joint = generate_latents(models, &cond, &outputs, sampler, guidance, &mut rngs)?;
    let mut alone = Vec::with_capacity(2);
    for m in outputs {
        let mut r = [chain_rng(chain_seed, m)];
        alone.extend(generate_latents(models, &cond, &[m], sampler, guidance, &mut r)?);
    }
    Ok(JointComparison {
        pair,
        joint: score_path(models, oracles, pair, &joint[0], &joint[1])?,
        independent: score_path(models, oracles, pair, &alone[0], &alone[1])?,
        chain_seed,
    })
}
