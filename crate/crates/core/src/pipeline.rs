//! End-to-end stages over an output directory.
//!
//! Each stage reads the artifacts of earlier stages, trains or generates
//! with a seed derived from the run seed and its own name, and writes its
//! artifacts atomically. Every artifact carries the run config hash.
//!
//! ```text
//! data/<m>.cds, data/manifest     gen-data
//! codecs.ckpt                     train-codecs
//! align.ckpt                      train-align
//! ldm.ckpt                        train-ldm
//! joint-<k>.ckpt, joint-<k>.json  train-joint --stage k
//! oracles.ckpt                    eval (trained on first use)
//! samples/<m>.cds, samples/<m>.txt
//! eval/<name>.jsonl
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alignment::PromptEncoders;
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::codecs::Codec;
use crate::config::RunConfig;
use crate::denoiser::{default_prompt_sources, train_ldm, Denoiser};
use crate::error::{Error, Result};
use crate::eval::{blended_text_prompts, joint_vs_independent, parse_records, JointComparison, Oracles};
use crate::joint::{generate, train_joint_stage, EnvironmentEncoder, GenerationRequest, Models, StageReport};
use crate::nn::with_progress;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::world::{ascii, load_dataset, make_samples, save_dataset, Concept, Modality, PairingPolicy, Sample};

/// One line of the structured progress log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    /// `progress`, `info`, `warning` or `done`.
    pub event: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    pub wall_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub config_hash: String,
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log records serialise")
    }
}

type Sink = Rc<RefCell<Box<dyn FnMut(&LogRecord)>>>;

/// How far through training a set of models has been loaded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    /// Codecs and prompt encoders, base denoisers, fresh environment encoders.
    Ldm,
    /// After joint stage `k` (1-based).
    Joint(usize),
}

/// Mean score of one (metric, pair) group across report files.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub metric: String,
    pub pair: String,
    pub mean: f64,
    pub count: usize,
}

pub struct Pipeline {
    out: PathBuf,
    config: RunConfig,
    hash: String,
    sink: Sink,
    start: Instant,
}

impl Pipeline {
    pub fn new(out: impl Into<PathBuf>, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        Ok(Self {
            out: out.into(),
            config,
            hash,
            sink: Rc::new(RefCell::new(Box::new(|_: &LogRecord| {}))),
            start: Instant::now(),
        })
    }

    /// Route log records to `sink` instead of discarding them.
    pub fn with_sink(mut self, sink: impl FnMut(&LogRecord) + 'static) -> Self {
        self.sink = Rc::new(RefCell::new(Box::new(sink)));
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn rng(&self, label: &str) -> SeededRng {
        SeededRng::derive(self.config.seed, label)
    }

    fn record(&self, stage: &str, event: &str, message: Option<String>) -> LogRecord {
        LogRecord {
            stage: stage.into(),
            event: event.into(),
            step: None,
            steps: None,
            loss: None,
            wall_s: self.start.elapsed().as_secs_f64(),
            message,
            config_hash: self.hash.clone(),
        }
    }

    fn emit(&self, r: LogRecord) {
        (self.sink.borrow_mut())(&r);
    }

    pub fn info(&self, stage: &str, message: impl Into<String>) {
        self.emit(self.record(stage, "info", Some(message.into())));
    }

    fn warn(&self, stage: &str, message: impl Into<String>) {
        self.emit(self.record(stage, "warning", Some(message.into())));
    }

    fn done(&self, stage: &str) {
        self.emit(self.record(stage, "done", None));
    }

    /// Run `body`, logging training progress about twenty times per loop.
    fn tracked<R>(&self, stage: &str, body: impl FnOnce() -> R) -> R {
        let sink = self.sink.clone();
        let (stage, hash, start) = (stage.to_string(), self.hash.clone(), self.start);
        with_progress(
            move |step, steps, loss| {
                let every = (steps / 20).max(1);
                if (step + 1) % every == 0 || step + 1 == steps {
                    (sink.borrow_mut())(&LogRecord {
                        stage: stage.clone(),
                        event: "progress".into(),
                        step: Some(step + 1),
                        steps: Some(steps),
                        loss: Some(loss),
                        wall_s: start.elapsed().as_secs_f64(),
                        message: None,
                        config_hash: hash.clone(),
                    });
                }
            },
            body,
        )
    }

    fn load_checkpoint(&self, file: &str, producer: &str) -> Result<Checkpoint> {
        let path = self.path(file);
        if !path.exists() {
            return Err(Error::Dependency(format!(
                "{} not found; run `{producer}` first",
                path.display()
            )));
        }
        let ck = Checkpoint::load(&path)?;
        if ck.config_hash != self.hash {
            self.warn(
                "load",
                format!("{file} was written under config {} but this run is {}; loading anyway", ck.config_hash, self.hash),
            );
        }
        Ok(ck)
    }

    fn save_checkpoint(&self, ck: &Checkpoint, file: &str) -> Result<()> {
        ck.save(&self.path(file))
    }

    // ---- model skeletons -------------------------------------------------

    fn fresh_codecs(&self) -> Vec<Codec<f32>> {
        Modality::ALL
            .iter()
            .map(|&m| Codec::new(m, self.config.codec_config(), &mut self.rng(&format!("init.codec.{m}"))))
            .collect()
    }

    fn fresh_env(&self) -> Vec<EnvironmentEncoder<f32>> {
        Modality::ALL
            .iter()
            .map(|&m| EnvironmentEncoder::new(m, self.config.env_hidden, &mut self.rng(&format!("init.env.{m}"))))
            .collect()
    }

    fn fresh_models(&self) -> Result<Models<f32>> {
        Ok(Models {
            sched: self.config.schedule()?,
            codecs: self.fresh_codecs(),
            prompts: PromptEncoders::new(self.config.align_hidden, &mut self.rng("init.prompt")),
            denoisers: Modality::ALL
                .iter()
                .map(|&m| Denoiser::new(m, self.config.denoiser_config(), &mut self.rng(&format!("init.ldm.{m}"))))
                .collect::<Result<_>>()?,
            env: self.fresh_env(),
        })
    }

    fn fresh_oracles(&self) -> Oracles {
        Oracles::new(self.config.oracle_hidden, &mut self.rng("init.oracle"))
    }

    fn load_codecs(&self, models: &mut Models<f32>) -> Result<()> {
        let ck = self.load_checkpoint("codecs.ckpt", "train-codecs")?;
        for c in &mut models.codecs {
            ck.load_params(&format!("codec.{}.", c.modality), &mut c.params)?;
        }
        Ok(())
    }

    fn load_prompts(&self, models: &mut Models<f32>) -> Result<()> {
        let ck = self.load_checkpoint("align.ckpt", "train-align")?;
        for m in Modality::ALL {
            ck.load_params(&format!("prompt.{m}."), models.prompts.get_mut(m).params_mut())?;
        }
        Ok(())
    }

    fn joint_file(k: usize) -> String {
        format!("joint-{k}.ckpt")
    }

    fn stage_count(&self) -> usize {
        self.config.joint_plan.stages.len()
    }

    /// Trained models up to `level`.
    pub fn load_models(&self, level: Level) -> Result<Models<f32>> {
        let mut models = self.fresh_models()?;
        self.load_codecs(&mut models)?;
        self.load_prompts(&mut models)?;
        let (file, producer) = match level {
            Level::Ldm => ("ldm.ckpt".to_string(), "train-ldm".to_string()),
            Level::Joint(k) => {
                if k == 0 || k > self.stage_count() {
                    return Err(Error::InvalidArgument(format!(
                        "joint stage must be in 1..={}, got {k}",
                        self.stage_count()
                    )));
                }
                (Self::joint_file(k), format!("train-joint --stage {k}"))
            }
        };
        let ck = self.load_checkpoint(&file, &producer)?;
        for d in &mut models.denoisers {
            ck.load_params(&format!("ldm.{}.", d.modality), &mut d.params)?;
        }
        if let Level::Joint(_) = level {
            for v in &mut models.env {
                ck.load_params(&format!("env.{}.", v.modality), &mut v.params)?;
            }
        }
        Ok(models)
    }

    /// Trained oracles, training and saving them on first use.
    pub fn load_oracles(&self) -> Result<Oracles> {
        if !self.path("oracles.ckpt").exists() {
            self.train_oracles()?;
        }
        let ck = self.load_checkpoint("oracles.ckpt", "eval")?;
        let mut oracles = self.fresh_oracles();
        for o in &mut oracles.oracles {
            ck.load_params(&format!("oracle.{}.", o.modality()), &mut o.net.params)?;
            o.trained = true;
        }
        Ok(oracles)
    }

    // ---- stages -------------------------------------------------------------

    /// Render the codec training sets.
    pub fn gen_data(&self) -> Result<()> {
        let stage = "gen-data";
        let mut manifest = format!("config_hash = {}\n", self.hash);
        for m in Modality::ALL {
            let samples = make_samples(m, self.config.data_samples, &mut self.rng(&format!("{stage}.{m}")));
            save_dataset(&samples, &self.path(&format!("data/{m}.cds")))?;
            manifest += &format!("{m}.cds = {}\n", samples.len());
        }
        write_atomic(&self.path("data/manifest"), manifest.as_bytes())?;
        self.done(stage);
        Ok(())
    }

    fn load_data(&self, m: Modality) -> Result<Vec<Sample>> {
        let manifest = self.path("data/manifest");
        if !manifest.exists() {
            return Err(Error::Dependency(format!("{} not found; run `gen-data` first", manifest.display())));
        }
        let text = std::fs::read_to_string(&manifest)?;
        let recorded = text.lines().find_map(|l| l.strip_prefix("config_hash = ")).unwrap_or("");
        if recorded != self.hash {
            self.warn("load", format!("data was written under config {recorded} but this run is {}", self.hash));
        }
        load_dataset(&self.path(&format!("data/{m}.cds")))
    }

    pub fn train_codecs(&self) -> Result<()> {
        let stage = "train-codecs";
        let mut codecs = self.fresh_codecs();
        let mut ck = Checkpoint::new(&self.hash);
        for c in &mut codecs {
            let m = c.modality;
            let data = self.load_data(m)?;
            let steps = if m == Modality::Text {
                self.config.codec_text_steps
            } else {
                self.config.codec_steps
            };
            let mut rng = self.rng(&format!("{stage}.{m}"));
            self.tracked(&format!("{stage}.{m}"), || {
                c.train(&data, steps, self.config.codec_batch, self.config.codec_optim.adam(), &mut rng)
            })?;
            c.fit_latent_stats(&data.iter().collect::<Vec<_>>())?;
            ck.add_params(&format!("codec.{m}."), &c.params);
        }
        self.save_checkpoint(&ck, "codecs.ckpt")?;
        self.done(stage);
        Ok(())
    }

    pub fn train_align(&self) -> Result<()> {
        let stage = "train-align";
        let mut prompts = PromptEncoders::<f32>::new(self.config.align_hidden, &mut self.rng("init.prompt"));
        let mut rng = self.rng(stage);
        self.tracked(stage, || {
            prompts.train_bridging(&self.config.align_plan, &PairingPolicy::default(), self.config.align_config(), &mut rng)
        })?;
        let mut ck = Checkpoint::new(&self.hash);
        for m in Modality::ALL {
            ck.add_params(&format!("prompt.{m}."), prompts.get(m).params());
        }
        self.save_checkpoint(&ck, "align.ckpt")?;
        self.done(stage);
        Ok(())
    }

    pub fn train_ldm(&self) -> Result<()> {
        let stage = "train-ldm";
        let mut models = self.fresh_models()?;
        self.load_codecs(&mut models)?;
        self.load_prompts(&mut models)?;
        let policy = PairingPolicy::default();
        let mut ck = Checkpoint::new(&self.hash);
        for i in 0..models.denoisers.len() {
            let m = models.denoisers[i].modality;
            let mut rng = self.rng(&format!("{stage}.{m}"));
            let (codecs, prompts, sched) = (&models.codecs, &models.prompts, &models.sched);
            let net = &mut models.denoisers[i];
            self.tracked(&format!("{stage}.{m}"), || {
                train_ldm(net, &codecs[i], prompts, &default_prompt_sources(m), &policy, sched, self.config.ldm_config(), &mut rng)
            })?;
            ck.add_params(&format!("ldm.{m}."), &net.params);
        }
        self.save_checkpoint(&ck, "ldm.ckpt")?;
        self.done(stage);
        Ok(())
    }

    /// Train joint stage `k` (1-based) on top of stage `k - 1`.
    pub fn train_joint(&self, k: usize) -> Result<StageReport> {
        let stage = format!("train-joint.{k}");
        let n = self.stage_count();
        if k == 0 || k > n {
            return Err(Error::InvalidArgument(format!("joint stage must be in 1..={n}, got {k}")));
        }
        let mut models = if k == 1 {
            self.load_models(Level::Ldm)?
        } else {
            self.load_models(Level::Joint(k - 1))?
        };
        let plan = &self.config.joint_plan;
        let mut rng = self.rng(&stage);
        let report = self.tracked(&stage, || {
            train_joint_stage(&mut models, plan, k - 1, &PairingPolicy::default(), self.config.joint_config(), &mut rng)
        })?;
        let mut ck = Checkpoint::new(&self.hash);
        for d in &models.denoisers {
            ck.add_params(&format!("ldm.{}.", d.modality), &d.params);
        }
        for v in &models.env {
            ck.add_params(&format!("env.{}.", v.modality), &v.params);
        }
        self.save_checkpoint(&ck, &Self::joint_file(k))?;
        let (a, b) = plan.stages[k - 1].pair;
        let ledger = serde_json::json!({
            "stage": k,
            "pair": format!("{a}+{b}"),
            "declared": report.declared,
            "changed": report.changed,
            "config_hash": self.hash,
        });
        write_atomic(&self.path(&format!("joint-{k}.json")), (ledger.to_string() + "\n").as_bytes())?;
        if report.changed != report.declared {
            self.warn(&stage, "modified parameters differ from the declared trainable set");
        }
        self.done(&stage);
        Ok(report)
    }

    pub fn train_oracles(&self) -> Result<()> {
        let stage = "train-oracles";
        let mut oracles = self.fresh_oracles();
        let mut rng = self.rng(stage);
        let c = &self.config;
        self.tracked(stage, || oracles.train_all(c.oracle_steps, c.oracle_batch, c.oracle_optim.adam(), &mut rng))?;
        let mut ck = Checkpoint::new(&self.hash);
        for o in &oracles.oracles {
            ck.add_params(&format!("oracle.{}.", o.modality()), &o.net.params);
        }
        self.save_checkpoint(&ck, "oracles.ckpt")?;
        self.done(stage);
        Ok(())
    }

    /// Every training stage in order.
    pub fn train_all(&self) -> Result<Vec<StageReport>> {
        self.gen_data()?;
        self.train_codecs()?;
        self.train_align()?;
        self.train_ldm()?;
        (1..=self.stage_count()).map(|k| self.train_joint(k)).collect()
    }

    // ---- generation and evaluation -----------------------------------------

    /// Generate `outputs` from weighted prompts and write them under `samples/`.
    ///
    /// A single output needs only the base denoisers; several outputs need
    /// every joint stage.
    pub fn sample(&self, prompts: Vec<(Sample, f64)>, outputs: &[Modality], seed: u64) -> Result<Vec<Sample>> {
        let level = if outputs.len() > 1 {
            Level::Joint(self.stage_count())
        } else {
            Level::Ldm
        };
        let models = self.load_models(level)?;
        let intended = prompts
            .iter()
            .fold(None::<(Concept, f64)>, |best, (s, w)| match best {
                Some((_, bw)) if bw >= *w => best,
                _ => Some((s.concept, *w)),
            })
            .map_or(Concept { class_id: 0, style: 0.0 }, |b| b.0);
        let request = GenerationRequest {
            prompts,
            outputs: outputs.to_vec(),
            sampler: self.config.sampler(),
            guidance: self.config.guidance,
            seed,
        };
        let mut manifest = format!("config_hash = {}\nseed = {seed}\n", self.hash);
        let mut samples = Vec::new();
        for (m, payload) in generate(&request, &models)? {
            let sample = Sample {
                modality: m,
                payload: payload.reshape(m.payload_dims())?,
                concept: intended,
            };
            save_dataset(std::slice::from_ref(&sample), &self.path(&format!("samples/{m}.cds")))?;
            let text = format!("# {m} config_hash={} seed={seed}\n{}", self.hash, ascii(&sample));
            write_atomic(&self.path(&format!("samples/{m}.txt")), text.as_bytes())?;
            manifest += &format!("{m}.cds\n");
            samples.push(sample);
        }
        write_atomic(&self.path("samples/manifest"), manifest.as_bytes())?;
        self.done("sample");
        Ok(samples)
    }

    /// Joint versus independent generation of `pair` over `n` blended text
    /// prompts. Writes `eval/joint-vs-independent.<a>+<b>.jsonl` (SIM per
    /// prompt and aggregate for both paths) and a sibling `.agreement.jsonl`.
    pub fn eval_joint_vs_independent(&self, pair: (Modality, Modality), n: usize) -> Result<JointComparison> {
        let stage = "eval.joint-vs-independent";
        let models = self.load_models(Level::Joint(self.stage_count()))?;
        let oracles = self.load_oracles()?;
        let prompts = blended_text_prompts(n, &mut self.rng("eval.prompts"));
        let cmp = joint_vs_independent(
            &models,
            &oracles,
            &prompts,
            pair,
            self.config.sampler(),
            self.config.guidance,
            self.config.seed,
        )?;
        let name = format!("joint-vs-independent.{}+{}", pair.0, pair.1);
        let sims: String = cmp.reports(&self.hash).iter().map(|r| r.to_jsonl()).collect();
        write_atomic(&self.path(&format!("eval/{name}.jsonl")), sims.as_bytes())?;
        let agreement: String = cmp.agreement_reports(&self.hash).iter().map(|r| r.to_jsonl()).collect();
        write_atomic(&self.path(&format!("eval/{name}.agreement.jsonl")), agreement.as_bytes())?;
        self.info(
            stage,
            format!(
                "{}+{}: SIM joint {:.4} independent {:.4}; agreement joint {:.3} independent {:.3}",
                pair.0,
                pair.1,
                cmp.joint.mean_sim(),
                cmp.independent.mean_sim(),
                cmp.joint.agreement_rate(),
                cmp.independent.agreement_rate()
            ),
        );
        self.done(stage);
        Ok(cmp)
    }
}

/// Group report records from `files` by (metric, pair) and average them.
/// Aggregate lines are skipped; mixed config hashes are refused unless `force`.
pub fn compare_reports(files: &[PathBuf], force: bool) -> Result<Vec<Comparison>> {
    let mut text = String::new();
    for f in files {
        text += &std::fs::read_to_string(f)?;
        text.push('\n');
    }
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in parse_records(&text, force)? {
        if r.prompt_id.is_some() {
            groups.entry((r.metric, r.pair)).or_default().push(r.score);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((metric, pair), v)| Comparison {
            metric,
            pair,
            mean: v.iter().sum::<f64>() / v.len() as f64,
            count: v.len(),
        })
        .collect())
}

/// Parse a prompt string `<modality>:class K [style S]`.
///
/// The sample is rendered from the concept with `rng`; style defaults to 0.5.
pub fn parse_prompt(spec: &str, rng: &mut SeededRng) -> Result<Sample> {
    let bad = |why: &str| Error::InvalidArgument(format!("prompt `{spec}`: {why}"));
    let (m, rest) = spec.split_once(':').ok_or_else(|| bad("expected <modality>:<content>"))?;
    let m: Modality = m.trim().parse()?;
    let rest = rest.trim();
    if let Some(path) = rest.strip_prefix('@') {
        let samples = load_dataset(Path::new(path))?;
        let s = samples.into_iter().next().ok_or_else(|| bad("dataset file is empty"))?;
        if s.modality != m {
            return Err(Error::ModalityMismatch {
                expected: m,
                actual: s.modality,
            });
        }
        return Ok(s);
    }
    let words: Vec<&str> = rest.split_whitespace().collect();
    let (mut class, mut style) = (None, 0.5);
    let mut i = 0;
    while i < words.len() {
        let value = words.get(i + 1).ok_or_else(|| bad("missing value"))?;
        match words[i] {
            "class" => class = Some(value.parse::<usize>().map_err(|_| bad("class must be an integer"))?),
            "style" => style = value.parse::<f64>().map_err(|_| bad("style must be a number"))?,
            w => return Err(bad(&format!("unknown word `{w}`"))),
        }
        i += 2;
    }
    let concept = Concept::new(class.ok_or_else(|| bad("missing `class K`"))?, style)?;
    Ok(crate::world::render(concept, m, rng))
}

/// A sample's payload as a `[1, ...]` batch.
pub fn as_batch(sample: &Sample) -> Result<Tensor<f32>> {
    let mut dims = vec![1];
    dims.extend_from_slice(sample.modality.payload_dims());
    sample.payload.clone().reshape(&dims)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::tiny()
    }

    fn logged(out: &Path) -> (Pipeline, Rc<RefCell<Vec<LogRecord>>>) {
        let log = Rc::new(RefCell::new(Vec::new()));
        let l = log.clone();
        let p = Pipeline::new(out, tiny()).unwrap().with_sink(move |r| l.borrow_mut().push(r.clone()));
        (p, log)
    }

    #[test]
    fn stages_report_missing_dependencies() {
        let dir = tempfile::tempdir().unwrap();
        let (p, _) = logged(dir.path());
        let e = p.train_codecs().unwrap_err().to_string();
        assert!(e.contains("gen-data"), "{e}");
        let e = p.train_ldm().unwrap_err().to_string();
        assert!(e.contains("train-codecs"), "{e}");
        let e = p.train_joint(2).unwrap_err().to_string();
        assert!(e.contains("train-joint --stage 1") || e.contains("train-codecs"), "{e}");
        assert!(p.train_joint(0).is_err());
        assert!(p.train_joint(4).is_err());
    }

    #[test]
    fn joint_stage_two_names_stage_one() {
        let dir = tempfile::tempdir().unwrap();
        let (p, _) = logged(dir.path());
        p.gen_data().unwrap();
        p.train_codecs().unwrap();
        p.train_align().unwrap();
        p.train_ldm().unwrap();
        let e = p.train_joint(2).unwrap_err();
        assert!(matches!(e, Error::Dependency(_)));
        assert!(e.to_string().contains("train-joint --stage 1"), "{e}");
    }

    #[test]
    fn progress_and_hash_warning_are_logged() {
        let dir = tempfile::tempdir().unwrap();
        let (p, log) = logged(dir.path());
        p.gen_data().unwrap();
        p.train_codecs().unwrap();
        assert!(log.borrow().iter().any(|r| r.event == "progress" && r.loss.is_some()));
        assert!(log.borrow().iter().all(|r| r.config_hash == p.hash()));

        let mut other = tiny();
        other.seed += 1;
        let log2 = Rc::new(RefCell::new(Vec::new()));
        let l = log2.clone();
        let q = Pipeline::new(dir.path(), other).unwrap().with_sink(move |r| l.borrow_mut().push(r.clone()));
        q.train_align().unwrap();
        q.train_ldm().unwrap();
        assert!(log2.borrow().iter().any(|r| r.event == "warning" && r.message.as_deref().unwrap_or("").contains("codecs.ckpt")));
    }

    #[test]
    fn log_records_are_single_json_lines() {
        let r = LogRecord {
            stage: "x".into(),
            event: "progress".into(),
            step: Some(3),
            steps: Some(10),
            loss: Some(0.5),
            wall_s: 1.0,
            message: None,
            config_hash: "abc".into(),
        };
        let line = serde_json::to_string(&r).unwrap();
        assert!(!line.contains('\n') && !line.contains("message"));
        assert_eq!(serde_json::from_str::<LogRecord>(&line).unwrap(), r);
    }

    #[test]
    fn prompt_specs_parse() {
        let mut rng = SeededRng::new(1);
        let s = parse_prompt("text:class 3", &mut rng).unwrap();
        assert_eq!(s.modality, Modality::Text);
        assert_eq!(s.concept.class_id, 3);
        assert_eq!(s.tokens()[0], 3);
        let s = parse_prompt("audio: class 7 style 0.25", &mut rng).unwrap();
        assert_eq!((s.concept.class_id, s.concept.style), (7, 0.25));
        for bad in ["text", "smell:class 1", "text:class", "text:class 9", "text:colour 2", "text:style 0.5"] {
            assert!(parse_prompt(bad, &mut rng).is_err(), "{bad}");
        }
    }

    #[test]
    fn prompt_from_dataset_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.cds");
        let mut rng = SeededRng::new(2);
        let s = crate::world::render(Concept::new(5, 0.5).unwrap(), Modality::Image, &mut rng);
        save_dataset(std::slice::from_ref(&s), &path).unwrap();
        let spec = format!("image:@{}", path.display());
        assert_eq!(parse_prompt(&spec, &mut rng).unwrap(), s);
        assert!(parse_prompt(&format!("audio:@{}", path.display()), &mut rng).is_err());
    }

    #[test]
    fn compare_refuses_mixed_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, hash: &str, score: f64| {
            let r = crate::eval::EvalReport {
                metric: "sim_joint".into(),
                pair: "image,audio".into(),
                seed: 1,
                config_hash: hash.into(),
                scores: vec![score, score],
            };
            let p = dir.path().join(name);
            std::fs::write(&p, r.to_jsonl()).unwrap();
            p
        };
        let a = write("a.jsonl", "h1", 0.2);
        let b = write("b.jsonl", "h2", 0.4);
        assert!(compare_reports(&[a.clone(), b.clone()], false).is_err());
        let got = compare_reports(&[a, b], true).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].count, 4);
        assert!((got[0].mean - 0.3).abs() < 1e-12);
    }
}
