use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use codi::config::RunConfig;
use codi::integrity::gradient_suite;
use codi::pipeline::{compare_reports, parse_prompt, Pipeline};
use codi::world::Modality;
use codi::SeededRng;

/// Composable any-to-any diffusion over a synthetic four-modality world.
#[derive(Parser, Debug)]
#[command(name = "codi", version)]
struct Cli {
    /// Run config file (`key = value` lines under `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for all artifacts.
    #[arg(long, global = true, env = "CODI_OUT", default_value = "codi-out")]
    dir: PathBuf,

    /// Suppress the JSON progress log on stderr.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render codec training sets.
    GenData,
    /// Train the per-modality autoencoders.
    TrainCodecs,
    /// Align the prompt encoders through text.
    TrainAlign,
    /// Train the single-modality latent denoisers.
    TrainLdm,
    /// Train one joint stage on top of the previous one.
    TrainJoint {
        #[arg(long)]
        stage: usize,
    },
    /// Generate one or more modalities from weighted prompts.
    Sample(SampleArgs),
    /// Evaluation harnesses.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Check tape gradients against finite differences.
    Gradcheck,
    /// Print the effective config.
    Config,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Prompt `<modality>:class K [style S]` or `<modality>:@file.cds`; repeatable.
    #[arg(long = "in")]
    inputs: Vec<String>,

    /// Interpolation weights, one per prompt (default: equal).
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,

    /// Output modalities, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    out: Vec<Modality>,

    /// Chain seed (default: the config seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Compare co-generated and separately generated pairs.
    JointVsIndependent {
        /// Output pair, e.g. `image,audio`.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        pair: Vec<Modality>,
        /// Number of prompts (default: from the config).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Average report files by metric and pair.
    Compare {
        files: Vec<PathBuf>,
        /// Compare reports from different configs.
        #[arg(long)]
        force: bool,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<bool> {
    let config = load_config(cli.config.as_ref())?;
    let quiet = cli.quiet;
    let pipeline = Pipeline::new(&cli.dir, config.clone())?.with_sink(move |r| {
        if !quiet {
            eprintln!("{}", r.to_json());
        }
    });
    match cli.command {
        Command::GenData => pipeline.gen_data()?,
        Command::TrainCodecs => pipeline.train_codecs()?,
        Command::TrainAlign => pipeline.train_align()?,
        Command::TrainLdm => pipeline.train_ldm()?,
        Command::TrainJoint { stage } => {
            let report = pipeline.train_joint(stage)?;
            println!("stage {stage}: {} parameters changed, {} declared", report.changed.len(), report.declared.len());
        }
        Command::Sample(args) => sample(&pipeline, args)?,
        Command::Eval(EvalCommand::JointVsIndependent { pair, n }) => {
            let [a, b] = pair[..] else {
                bail!("--pair takes exactly two modalities, got {}", pair.len());
            };
            let n = n.unwrap_or(config.eval_prompts);
            let cmp = pipeline.eval_joint_vs_independent((a, b), n)?;
            println!(
                "{a}+{b} over {n} prompts: SIM joint {:.4} independent {:.4}; agreement joint {:.3} independent {:.3}",
                cmp.joint.mean_sim(),
                cmp.independent.mean_sim(),
                cmp.joint.agreement_rate(),
                cmp.independent.agreement_rate()
            );
        }
        Command::Eval(EvalCommand::Compare { files, force }) => {
            if files.is_empty() {
                bail!("compare needs at least one report file");
            }
            for c in compare_reports(&files, force)? {
                println!("{} {} mean {:.4} over {}", c.metric, c.pair, c.mean, c.count);
            }
        }
        Command::Gradcheck => {
            let mut ok = true;
            for c in gradient_suite()? {
                let verdict = if c.passed() { "ok" } else { "FAIL" };
                println!("{verdict:4} {:24} {:.3e} (tolerance {:.0e})", c.name, c.error, c.tolerance);
                ok &= c.passed();
            }
            return Ok(ok);
        }
        Command::Config => print!("{}", config.to_text()),
    }
    Ok(true)
}

fn sample(pipeline: &Pipeline, args: SampleArgs) -> Result<()> {
    let seed = args.seed.unwrap_or(pipeline.config().seed);
    let weights = match (args.weights.len(), args.inputs.len()) {
        (0, n) => vec![1.0 / n.max(1) as f64; n],
        (w, n) if w == n => args.weights.clone(),
        (w, n) => bail!("{w} weights given for {n} prompts"),
    };
    let prompts = args
        .inputs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut rng = SeededRng::derive(seed, &format!("prompt.{i}"));
            Ok((parse_prompt(spec, &mut rng)?, weights[i]))
        })
        .collect::<Result<Vec<_>>>()?;
    for s in pipeline.sample(prompts, &args.out, seed)? {
        let path = pipeline.path(&format!("samples/{}.txt", s.modality));
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
