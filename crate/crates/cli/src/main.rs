//! `loma` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use loma::generator::PositionType;

use crate::config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "loma", version, about = "Compressed-memory attention toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "t", global = true)]
    t: Option<usize>,
    #[arg(long = "c", global = true)]
    c: Option<usize>,
    #[arg(long = "s-hat", global = true)]
    s_hat: Option<usize>,
    /// intermittent or sequential
    #[arg(long = "position-type", global = true)]
    position_type: Option<String>,
    #[arg(long = "disable-compression", global = true)]
    disable_compression: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoint.bin, loss.csv and config.toml.
    Train {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Greedy generation with in-flight cache compression.
    Generate {
        /// Prompt text (tokenized as BOS + bytes).
        #[arg(long)]
        prompt: Option<String>,
        /// Prompt as a JSON array of token ids.
        #[arg(long)]
        prompt_ids: Option<String>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Write the training mask and position ids of an n-chunk sample.
    MaskDump { t: usize, c: usize, n_chunks: usize },
    /// Repetition accuracy on a held-out corpus.
    Eval {
        /// `model` or `copy`.
        #[arg(long)]
        decoder: Option<String>,
    },
    /// Latency table and vanilla vs. compressed cost comparison.
    Perf {
        /// measured, linear, constant or affine
        #[arg(long)]
        cost_model: Option<String>,
    },
}

fn resolve(common: &Common, command: &Command) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    if let Some(t) = common.t {
        cfg.loma.t = t;
    }
    if let Some(c) = common.c {
        cfg.loma.c = c;
    }
    if let Some(s_hat) = common.s_hat {
        cfg.train.s_hat = s_hat;
    }
    if let Some(pt) = &common.position_type {
        cfg.loma.position_type = pt.parse::<PositionType>().map_err(|e| ConfigError(e.to_string()))?;
    }
    cfg.loma.disable_compression |= common.disable_compression;
    if common.out.is_some() {
        cfg.paths.out_dir = common.out.clone();
    }
    if common.checkpoint.is_some() {
        cfg.paths.checkpoint = common.checkpoint.clone();
    }
    match command {
        Command::Train { steps: Some(s) } => cfg.train.max_steps = *s,
        Command::Generate { prompt, prompt_ids, max_len } => {
            if let Some(p) = prompt {
                cfg.generate.prompt = p.clone();
            }
            if let Some(ids) = prompt_ids {
                cfg.generate.prompt_ids =
                    serde_json::from_str(ids).map_err(|e| ConfigError(format!("--prompt-ids: {e}")))?;
            }
            if let Some(n) = max_len {
                cfg.generate.max_len = *n;
            }
        }
        Command::MaskDump { t, c, .. } => {
            cfg.loma.t = *t;
            cfg.loma.c = *c;
        }
        Command::Eval { decoder: Some(d) } => cfg.eval.decoder = d.clone(),
        Command::Perf { cost_model: Some(m) } => cfg.perf.cost_model = m.clone(),
        _ => {}
    }
    Ok(cfg)
}

/// 2: configuration, 3: geometry or length constraint, 4: numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<loma::Error>() {
            use loma::Error as E;
            return match e {
                E::Config(_) => 2,
                E::LengthPlan(_) | E::Capacity { .. } | E::Precondition(_) | E::Shape(_) | E::Index { .. } => 3,
                E::Diverged { .. } | E::DegenerateRow { .. } | E::GradientFlow(_) => 4,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = resolve(&cli.common, &cli.command).and_then(|cfg| match cli.command {
        Command::Train { .. } => commands::train(&cfg),
        Command::Generate { .. } => commands::generate(&cfg),
        Command::MaskDump { n_chunks, .. } => commands::mask_dump(&cfg, n_chunks),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Perf { .. } => commands::perf(&cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
