//! Run configuration: a flat text file of `key = value` lines under
//! `[section]` headers. The hash of the canonical rendering stamps every
//! artifact of a run.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::alignment::{default_align_stages, AlignConfig, AlignStage, TEMPERATURE};
use crate::codecs::CodecConfig;
use crate::denoiser::{DenoiserConfig, LdmConfig};
use crate::diffusion::{Sampler, VarianceSchedule};
use crate::error::{Error, Result};
use crate::joint::{Component, Guidance, JointConfig, JointStage, StagePlan, CONTRASTIVE_WEIGHT, ENV_HIDDEN, ENV_TEMPERATURE};
use crate::nn::AdamConfig;
use crate::world::Modality;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Optim {
    pub lr: f64,
    pub weight_decay: f64,
}

impl Optim {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Training samples generated per modality.
    pub data_samples: usize,
    pub codec_hidden: usize,
    pub codec_text_embed: usize,
    pub codec_steps: usize,
    /// Text needs longer: its decoder must recover discrete tokens.
    pub codec_text_steps: usize,
    pub codec_batch: usize,
    pub codec_optim: Optim,
    pub align_hidden: usize,
    pub align_tau: f64,
    pub align_steps: usize,
    pub align_batch: usize,
    pub align_optim: Optim,
    pub align_plan: Vec<AlignStage>,
    pub ldm_width: usize,
    pub ldm_blocks: usize,
    pub ldm_chunks: usize,
    pub ldm_steps: usize,
    pub ldm_batch: usize,
    pub ldm_cond_dropout: f64,
    pub ldm_optim: Optim,
    pub env_hidden: usize,
    pub joint_steps: usize,
    pub joint_batch: usize,
    pub joint_cond_dropout: f64,
    pub joint_lambda: f64,
    pub joint_tau: f64,
    pub joint_optim: Optim,
    pub joint_plan: StagePlan,
    pub oracle_hidden: usize,
    pub oracle_steps: usize,
    pub oracle_batch: usize,
    pub oracle_optim: Optim,
    pub sample_steps: usize,
    pub sample_eta: f64,
    pub guidance: Guidance,
    pub eval_prompts: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let joint = JointConfig::default();
        let fast = Optim {
            lr: 3e-3,
            weight_decay: 0.0,
        };
        Self {
            seed: 7,
            schedule_steps: 100,
            beta_start: 0.0085,
            beta_end: 0.12,
            data_samples: 4000,
            codec_hidden: CodecConfig::default().hidden,
            codec_text_embed: CodecConfig::default().text_embed,
            codec_steps: 1500,
            codec_text_steps: 4000,
            codec_batch: 64,
            codec_optim: fast,
            align_hidden: 64,
            align_tau: TEMPERATURE,
            align_steps: 1500,
            align_batch: 64,
            align_optim: fast,
            align_plan: default_align_stages(),
            ldm_width: DenoiserConfig::default().width,
            ldm_blocks: DenoiserConfig::default().blocks,
            ldm_chunks: DenoiserConfig::default().temporal_chunks,
            ldm_steps: 2000,
            ldm_batch: 64,
            ldm_cond_dropout: 0.1,
            ldm_optim: Optim {
                lr: 2e-3,
                weight_decay: 0.0,
            },
            env_hidden: ENV_HIDDEN,
            joint_steps: joint.steps,
            joint_batch: joint.batch,
            joint_cond_dropout: joint.cond_dropout,
            joint_lambda: CONTRASTIVE_WEIGHT,
            joint_tau: ENV_TEMPERATURE,
            joint_optim: Optim {
                lr: joint.adam.lr,
                weight_decay: joint.adam.weight_decay,
            },
            joint_plan: StagePlan::default(),
            oracle_hidden: 64,
            oracle_steps: 600,
            oracle_batch: 64,
            oracle_optim: fast,
            sample_steps: 50,
            sample_eta: 1.0,
            guidance: Guidance::default(),
            eval_prompts: 200,
        }
    }
}

enum Field<'a> {
    U64(&'a mut u64),
    Usize(&'a mut usize),
    F64(&'a mut f64),
    AlignPlan(&'a mut Vec<AlignStage>),
    JointPlan(&'a mut StagePlan),
}

impl Field<'_> {
    fn render(&self) -> String {
        match self {
            Field::U64(v) => v.to_string(),
            Field::Usize(v) => v.to_string(),
            Field::F64(v) => format!("{v:?}"),
            Field::AlignPlan(p) => format_align_plan(p),
            Field::JointPlan(p) => format_joint_plan(p),
        }
    }

    fn set(&mut self, raw: &str) -> std::result::Result<(), String> {
        let bad = |e: &dyn std::fmt::Display| e.to_string();
        match self {
            Field::U64(v) => **v = raw.parse().map_err(|e| bad(&e))?,
            Field::Usize(v) => **v = raw.parse().map_err(|e| bad(&e))?,
            Field::F64(v) => **v = raw.parse().map_err(|e| bad(&e))?,
            Field::AlignPlan(p) => **p = parse_align_plan(raw).map_err(|e| bad(&e))?,
            Field::JointPlan(p) => **p = parse_joint_plan(raw).map_err(|e| bad(&e))?,
        }
        Ok(())
    }
}

impl RunConfig {
    /// Every setting as `(section, key, field)`, in file order. The seed has
    /// an empty section and precedes all headers.
    fn fields(&mut self) -> Vec<(&'static str, &'static str, Field<'_>)> {
        use Field::*;
        vec![
            ("", "seed", U64(&mut self.seed)),
            ("schedule", "steps", Usize(&mut self.schedule_steps)),
            ("schedule", "beta_start", F64(&mut self.beta_start)),
            ("schedule", "beta_end", F64(&mut self.beta_end)),
            ("data", "samples", Usize(&mut self.data_samples)),
            ("codecs", "hidden", Usize(&mut self.codec_hidden)),
            ("codecs", "text_embed", Usize(&mut self.codec_text_embed)),
            ("codecs", "steps", Usize(&mut self.codec_steps)),
            ("codecs", "text_steps", Usize(&mut self.codec_text_steps)),
            ("codecs", "batch", Usize(&mut self.codec_batch)),
            ("codecs", "lr", F64(&mut self.codec_optim.lr)),
            ("codecs", "weight_decay", F64(&mut self.codec_optim.weight_decay)),
            ("align", "hidden", Usize(&mut self.align_hidden)),
            ("align", "tau", F64(&mut self.align_tau)),
            ("align", "steps", Usize(&mut self.align_steps)),
            ("align", "batch", Usize(&mut self.align_batch)),
            ("align", "lr", F64(&mut self.align_optim.lr)),
            ("align", "weight_decay", F64(&mut self.align_optim.weight_decay)),
            ("align", "plan", AlignPlan(&mut self.align_plan)),
            ("ldm", "width", Usize(&mut self.ldm_width)),
            ("ldm", "blocks", Usize(&mut self.ldm_blocks)),
            ("ldm", "chunks", Usize(&mut self.ldm_chunks)),
            ("ldm", "steps", Usize(&mut self.ldm_steps)),
            ("ldm", "batch", Usize(&mut self.ldm_batch)),
            ("ldm", "cond_dropout", F64(&mut self.ldm_cond_dropout)),
            ("ldm", "lr", F64(&mut self.ldm_optim.lr)),
            ("ldm", "weight_decay", F64(&mut self.ldm_optim.weight_decay)),
            ("joint", "env_hidden", Usize(&mut self.env_hidden)),
            ("joint", "steps", Usize(&mut self.joint_steps)),
            ("joint", "batch", Usize(&mut self.joint_batch)),
            ("joint", "cond_dropout", F64(&mut self.joint_cond_dropout)),
            ("joint", "lambda", F64(&mut self.joint_lambda)),
            ("joint", "tau", F64(&mut self.joint_tau)),
            ("joint", "lr", F64(&mut self.joint_optim.lr)),
            ("joint", "weight_decay", F64(&mut self.joint_optim.weight_decay)),
            ("joint", "plan", JointPlan(&mut self.joint_plan)),
            ("oracle", "hidden", Usize(&mut self.oracle_hidden)),
            ("oracle", "steps", Usize(&mut self.oracle_steps)),
            ("oracle", "batch", Usize(&mut self.oracle_batch)),
            ("oracle", "lr", F64(&mut self.oracle_optim.lr)),
            ("oracle", "weight_decay", F64(&mut self.oracle_optim.weight_decay)),
            ("sample", "steps", Usize(&mut self.sample_steps)),
            ("sample", "eta", F64(&mut self.sample_eta)),
            ("sample", "guidance_text", F64(&mut self.guidance.text)),
            ("sample", "guidance_image", F64(&mut self.guidance.image)),
            ("sample", "guidance_audio", F64(&mut self.guidance.audio)),
            ("sample", "guidance_video", F64(&mut self.guidance.video)),
            ("eval", "prompts", Usize(&mut self.eval_prompts)),
        ]
    }

    /// Canonical text: every key, fixed order, shortest round-trip floats.
    pub fn to_text(&self) -> String {
        let mut copy = self.clone();
        let mut out = String::new();
        let mut section = "";
        for (sec, key, field) in copy.fields() {
            if sec != section {
                let _ = write!(out, "\n[{sec}]\n");
                section = sec;
            }
            let _ = writeln!(out, "{key} = {}", field.render());
        }
        out
    }

    /// Parse a config file. Missing keys keep their defaults; unknown
    /// sections or keys are errors. `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        {
            let mut fields = cfg.fields();
            for (no, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let err = |msg: String| Error::Config {
                    line: no + 1,
                    msg,
                };
                if let Some(rest) = line.strip_prefix('[') {
                    let name = rest.strip_suffix(']').ok_or_else(|| err(format!("unterminated header `{line}`")))?;
                    if !fields.iter().any(|(s, _, _)| *s == name) {
                        return Err(err(format!("unknown section `{name}`")));
                    }
                    section = name.to_string();
                    continue;
                }
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
                let (key, value) = (key.trim(), value.trim());
                let field = fields
                    .iter_mut()
                    .find(|(s, k, _)| *s == section && *k == key)
                    .ok_or_else(|| err(format!("unknown key `{key}` in section `{section}`")))?;
                field.2.set(value).map_err(|m| err(format!("`{key}`: {m}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 prefix of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.sampler().grid(&self.schedule()?)?;
        for (name, p) in [("ldm", self.ldm_cond_dropout), ("joint", self.joint_cond_dropout)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} cond_dropout must lie in [0, 1], got {p}")));
            }
        }
        for (name, t) in [("align", self.align_tau), ("joint", self.joint_tau)] {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} tau must be positive, got {t}")));
            }
        }
        Ok(())
    }

    /// A seconds-long run with the default structure, for smoke tests.
    pub fn tiny() -> Self {
        Self {
            schedule_steps: 20,
            data_samples: 64,
            codec_hidden: 16,
            codec_text_embed: 8,
            codec_steps: 4,
            codec_text_steps: 4,
            codec_batch: 8,
            align_hidden: 16,
            align_steps: 4,
            align_batch: 8,
            ldm_width: 8,
            ldm_blocks: 1,
            ldm_steps: 4,
            ldm_batch: 8,
            env_hidden: 8,
            joint_steps: 4,
            joint_batch: 8,
            oracle_hidden: 8,
            oracle_steps: 4,
            oracle_batch: 8,
            sample_steps: 5,
            eval_prompts: 4,
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> Result<VarianceSchedule> {
        VarianceSchedule::linear(self.schedule_steps, self.beta_start, self.beta_end)
    }

    pub fn sampler(&self) -> Sampler {
        Sampler::Ddim {
            steps: self.sample_steps,
            eta: self.sample_eta,
        }
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            hidden: self.codec_hidden,
            text_embed: self.codec_text_embed,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            width: self.ldm_width,
            blocks: self.ldm_blocks,
            temporal_chunks: self.ldm_chunks,
            temporal: true,
        }
    }

    pub fn align_config(&self) -> AlignConfig {
        AlignConfig {
            steps: self.align_steps,
            batch: self.align_batch,
            tau: self.align_tau,
            adam: self.align_optim.adam(),
        }
    }

    pub fn ldm_config(&self) -> LdmConfig {
        LdmConfig {
            steps: self.ldm_steps,
            batch: self.ldm_batch,
            cond_dropout: self.ldm_cond_dropout,
            adam: self.ldm_optim.adam(),
        }
    }

    pub fn joint_config(&self) -> JointConfig {
        JointConfig {
            steps: self.joint_steps,
            batch: self.joint_batch,
            cond_dropout: self.joint_cond_dropout,
            contrastive_weight: self.joint_lambda,
            tau: self.joint_tau,
            adam: self.joint_optim.adam(),
        }
    }
}

fn parse_pair(s: &str) -> Result<(Modality, Modality)> {
    let (a, b) = s
        .split_once('+')
        .ok_or_else(|| Error::InvalidArgument(format!("expected `a+b`, got `{s}`")))?;
    Ok((a.parse()?, b.parse()?))
}

fn split_stages(s: &str) -> impl Iterator<Item = Result<((Modality, Modality), Vec<&str>)>> {
    s.split(';').filter(|x| !x.trim().is_empty()).map(|stage| {
        let (pair, items) = stage
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("expected `a+b:items`, got `{}`", stage.trim())))?;
        let items = items.split(',').map(str::trim).filter(|x| !x.is_empty()).collect();
        Ok((parse_pair(pair.trim())?, items))
    })
}

/// `text+image:text,image; text+audio:audio; ...`
pub fn parse_align_plan(s: &str) -> Result<Vec<AlignStage>> {
    split_stages(s)
        .map(|st| {
            let (pair, items) = st?;
            Ok(AlignStage {
                pair,
                trainable: items.iter().map(|m| m.parse()).collect::<Result<_>>()?,
            })
        })
        .collect()
}

pub fn format_align_plan(plan: &[AlignStage]) -> String {
    plan.iter()
        .map(|s| {
            let items: Vec<&str> = s.trainable.iter().map(|m| m.name()).collect();
            format!("{}+{}:{}", s.pair.0, s.pair.1, items.join(","))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// `text+image:attn.text,env.text,...; ...` where `attn.m` is the
/// environment attention of m's denoiser and `env.m` its encoder.
pub fn parse_joint_plan(s: &str) -> Result<StagePlan> {
    let stages = split_stages(s)
        .map(|st| {
            let (pair, items) = st?;
            let trainable = items
                .iter()
                .map(|c| match c.split_once('.') {
                    Some(("attn", m)) => Ok(Component::EnvAttention(m.parse()?)),
                    Some(("env", m)) => Ok(Component::EnvEncoder(m.parse()?)),
                    _ => Err(Error::InvalidArgument(format!("unknown component `{c}`"))),
                })
                .collect::<Result<_>>()?;
            Ok(JointStage { pair, trainable })
        })
        .collect::<Result<_>>()?;
    Ok(StagePlan { stages })
}

pub fn format_joint_plan(plan: &StagePlan) -> String {
    plan.stages
        .iter()
        .map(|s| {
            let items: Vec<String> = s
                .trainable
                .iter()
                .map(|c| match c {
                    Component::EnvAttention(m) => format!("attn.{m}"),
                    Component::EnvEncoder(m) => format!("env.{m}"),
                })
                .collect();
            format!("{}+{}:{}", s.pair.0, s.pair.1, items.join(","))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn defaults_carry_the_sampling_table() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.sample_steps, 50);
        assert_eq!(cfg.sample_eta, 1.0);
        assert_eq!(cfg.guidance.audio, 7.5);
        assert_eq!(cfg.joint_plan.stages.len(), 3);
        assert!(cfg.to_text().contains("guidance_audio = 7.5\n"));
    }

    #[test]
    fn partial_files_keep_defaults_and_change_the_hash() {
        let cfg = RunConfig::parse("seed = 11\n\n# comment\n[joint]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.joint_steps, 10);
        assert_eq!(cfg.ldm_steps, RunConfig::default().ldm_steps);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        let spaced = RunConfig::parse("  seed=11\n[joint]\n  steps   =  10\n").unwrap();
        assert_eq!(spaced.hash(), cfg.hash());
    }

    #[test]
    fn bad_files_name_the_line() {
        for (text, line) in [
            ("[nope]\n", 1),
            ("seed = 1\n[ldm]\ncolour = 3\n", 3),
            ("[ldm]\nsteps = many\n", 2),
            ("[ldm\n", 1),
            ("[joint]\nplan = text+image:attn.text,gpu.text\n", 2),
            ("seed\n", 1),
        ] {
            match RunConfig::parse(text) {
                Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(RunConfig::parse("[sample]\nsteps = 0\n").is_err());
        assert!(RunConfig::parse("[joint]\ncond_dropout = 1.5\n").is_err());
    }

    #[test]
    fn plans_round_trip() {
        let plan = StagePlan::default();
        assert_eq!(parse_joint_plan(&format_joint_plan(&plan)).unwrap(), plan);
        let align = default_align_stages();
        assert_eq!(parse_align_plan(&format_align_plan(&align)).unwrap(), align);
        assert!(parse_joint_plan("text+image:attn.sound").is_err());
        assert!(parse_align_plan("text-image:text").is_err());
    }
}
