//! Argument parsing. Flags override the config file; the merged result is
//! what every command echoes.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, Split};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io;

#[derive(Debug, Parser)]
#[command(name = "garmentfuse", version, about = "Multi-garment reference-attention diffusion at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; every other seed derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; every artifact lands below it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` assignments applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the single, multi and eval triplet splits.
    GenData {
        /// Restrict to one split: single, multi or eval.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Train the configured stages for `fusion.mode`.
    Train {
        /// Two epochs on 32 triplets per stage.
        #[arg(long)]
        smoke: bool,
        /// Restrict to one stage: single or multi.
        #[arg(long)]
        stage: Option<String>,
        /// Fusion mode: naive, concat_kv or addition.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Sample images for a garment list and caption.
    Sample {
        /// RADF checkpoint written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON list of `{"category": …, "image": "file.ppm"}`.
        #[arg(long)]
        garments: Option<PathBuf>,
        /// Caption; words outside the closed vocabulary map to one unknown token.
        #[arg(long)]
        caption: Option<String>,
        /// Comma-separated sampling seeds.
        #[arg(long)]
        seeds: Option<String>,
        /// Fusion mode: naive, concat_kv or addition.
        #[arg(long)]
        mode: Option<String>,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Score a checkpoint on the held-out eval split.
    Eval {
        /// RADF checkpoint written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fusion mode: naive, concat_kv or addition.
        #[arg(long)]
        mode: Option<String>,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Train and evaluate every fusion mode, then compare them.
    Ablate {
        /// Comma-separated fusion modes.
        #[arg(long)]
        modes: Option<String>,
        /// Smoke budget for every mode, as in `train --smoke`.
        #[arg(long)]
        smoke: bool,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    /// Sampling steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// ddim or ddpm.
    #[arg(long)]
    pub sampler: Option<String>,
}

fn apply(cfg: &mut RunConfig, key: &str, value: &str) -> CliResult<()> {
    cfg.set(key, value).map_err(|e| CliError::Usage(format!("{key}: {e}")))
}

fn apply_sampling(cfg: &mut RunConfig, s: &SamplingArgs) -> CliResult<()> {
    if let Some(n) = s.steps {
        apply(cfg, "sample.steps", &n.to_string())?;
    }
    if let Some(k) = &s.sampler {
        apply(cfg, "sample.sampler", k)?;
    }
    Ok(())
}

fn path_str(p: &std::path::Path) -> String {
    p.display().to_string()
}

/// Config file, then global flags, then `--set`, then command flags.
pub fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.global.config {
        Some(p) => {
            let bytes = io::read(p)?;
            let text = String::from_utf8(bytes).map_err(|_| CliError::Usage(format!("{} is not UTF-8", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &cli.global.out {
        cfg.run.out = o.clone();
    }
    for kv in &cli.global.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        apply(&mut cfg, k.trim(), v.trim())?;
    }
    match &cli.command {
        Command::GenData { .. } => {}
        Command::Train { smoke, stage, mode } => {
            if *smoke {
                cfg.train.smoke = true;
            }
            if let Some(s) = stage {
                apply(&mut cfg, "train.stages", s)?;
            }
            if let Some(m) = mode {
                apply(&mut cfg, "fusion.mode", m)?;
            }
        }
        Command::Sample {
            checkpoint,
            garments,
            caption,
            seeds,
            mode,
            sampling,
        } => {
            if let Some(c) = checkpoint {
                apply(&mut cfg, "sample.checkpoint", &path_str(c))?;
            }
            if let Some(g) = garments {
                apply(&mut cfg, "sample.garments", &path_str(g))?;
            }
            if let Some(c) = caption {
                cfg.sample.caption = c.clone();
            }
            if let Some(s) = seeds {
                apply(&mut cfg, "sample.seeds", s)?;
            }
            if let Some(m) = mode {
                apply(&mut cfg, "fusion.mode", m)?;
            }
            apply_sampling(&mut cfg, sampling)?;
        }
        Command::Eval {
            checkpoint,
            mode,
            sampling,
        } => {
            if let Some(c) = checkpoint {
                apply(&mut cfg, "eval.checkpoint", &path_str(c))?;
            }
            if let Some(m) = mode {
                apply(&mut cfg, "fusion.mode", m)?;
            }
            apply_sampling(&mut cfg, sampling)?;
        }
        Command::Ablate { modes, smoke, sampling } => {
            if let Some(m) = modes {
                apply(&mut cfg, "ablate.modes", m)?;
            }
            if *smoke {
                cfg.train.smoke = true;
            }
            apply_sampling(&mut cfg, sampling)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_split(name: &str) -> CliResult<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| CliError::Usage(format!("unknown stage {name:?}; expected single, multi or eval")))
}

/// Runs a parsed invocation; progress lines go to `log`.
pub fn run(cli: &Cli, log: &mut dyn FnMut(&str)) -> CliResult<()> {
    let split = match &cli.command {
        Command::GenData { stage: Some(s) } => Some(parse_split(s)?),
        _ => None,
    };
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::GenData { .. } => {
            let splits = split.map(|s| vec![s]).unwrap_or_else(|| Split::ALL.to_vec());
            let m = commands::gen_data(&cfg, &splits, log)?;
            for s in &m.splits {
                log(&format!("manifest: {} -> {} samples", s.name, s.samples.len()));
            }
        }
        Command::Train { .. } => {
            let run = commands::train(&cfg, log)?;
            log(&format!("checkpoint {}", run.checkpoint.display()));
        }
        Command::Sample { .. } => {
            commands::sample(&cfg, log)?;
        }
        Command::Eval { .. } => {
            commands::eval(&cfg, log)?;
        }
        Command::Ablate { .. } => {
            commands::ablate(&cfg, log)?;
        }
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I, log: &mut dyn FnMut(&str), err: &mut dyn FnMut(&str)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { crate::error::EXIT_USAGE } else { 0 };
            err(&e.to_string());
            return code;
        }
    };
    match run(&cli, log) {
        Ok(()) => 0,
        Err(e) => {
            err(&format!("error: {e}"));
            e.exit_code()
        }
    }
}
