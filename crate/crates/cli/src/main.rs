//! `paraformer` — train, decode, and measure transformer variants whose
//! selected attention / feed-forward layers use frozen random weights that
//! are redrawn every training epoch.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 anything
//! else at runtime.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use paraformer_core::{CoreError, Result};

use commands::SweepKind;
use config::{ExperimentConfig, Profile};

#[derive(Parser)]
#[command(name = "paraformer", version, about = "partly randomized transformer workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Flat `key = value` configuration file applied over the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile: `desk` (small dimensions) or `paper` (published dimensions).
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Master seed. Overrides the config file and the PARAFORMER_SEED
    /// environment variable; everything downstream derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Dialogue corpus (JSON lines). The bundled toy corpus when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output path (a base name for train, a file for the other commands;
    /// reports go to stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    /// greedy | temperature | topk | topp | beam
    #[arg(long)]
    strategy: Option<String>,
    /// Softmax temperature for the sampling strategies.
    #[arg(long)]
    temperature: Option<f64>,
    /// Candidate count for top-k sampling.
    #[arg(long)]
    k: Option<usize>,
    /// Probability mass for top-p sampling.
    #[arg(long)]
    p: Option<f64>,
    /// Beam width.
    #[arg(long)]
    width: Option<usize>,
    /// Cap on generated tokens per response.
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Redraw the frozen weights before decoding each context.
    #[arg(long)]
    reinit_per_context: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes `<out>.ckpt`, `<out>.vocab`, and `<out>.train.csv`.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Decode responses for every corpus example from a checkpoint (JSON lines).
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to decode from (expects `<stem>.vocab` beside it).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Diversity and coherence metrics over generation files.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Report format: csv | markdown.
        #[arg(long)]
        format: Option<String>,
        /// Generation files produced by `generate`.
        files: Vec<PathBuf>,
    },
    /// Train-and-measure grid over one axis; one report row per cell.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// sigma | gamma | plan | decode
        kind: String,
    },
    /// Parameter accounting for the randomized blocks and their
    /// conventional reference counterparts.
    Params {
        #[arg(long, default_value_t = 300)]
        n: u64,
        #[arg(long, default_value_t = 128)]
        d_qkv: u64,
        #[arg(long, default_value_t = 2048)]
        d_ff: u64,
        /// Width of the reference (non-randomized) comparison stack.
        #[arg(long, default_value_t = 512)]
        d_r: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_profile(name: &str) -> Result<Profile> {
    match name {
        "desk" => Ok(Profile::Desk),
        "paper" => Ok(Profile::Paper),
        other => Err(CoreError::InvalidConfig(format!(
            "unknown profile {other:?} (expected desk or paper)"
        ))),
    }
}

/// Profile, then config file, then flags; the seed falls back
/// flag > config file > PARAFORMER_SEED > 0.
fn resolve_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::for_profile(parse_profile(&common.profile)?);
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    } else if !cfg.seed_from_config {
        if let Ok(raw) = std::env::var("PARAFORMER_SEED") {
            cfg.seed = raw.parse().map_err(|_| {
                CoreError::InvalidConfig(format!("PARAFORMER_SEED: cannot parse {raw:?}"))
            })?;
        }
    }
    if common.corpus.is_some() {
        cfg.corpus = common.corpus.clone();
    }
    Ok(cfg)
}

fn apply_decode_args(cfg: &mut ExperimentConfig, d: &DecodeArgs) {
    if let Some(s) = &d.strategy {
        cfg.decode_strategy = s.clone();
    }
    if let Some(t) = d.temperature {
        cfg.temperature = t;
    }
    if let Some(k) = d.k {
        cfg.k = k;
    }
    if let Some(p) = d.p {
        cfg.p = p;
    }
    if let Some(w) = d.width {
        cfg.width = w;
    }
    if let Some(m) = d.max_new_tokens {
        cfg.max_new_tokens = m;
    }
    if let Some(r) = d.reinit_per_context {
        cfg.reinit_per_context = r;
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = resolve_config(&common)?;
            cfg.validate()?;
            commands::cmd_train(&cfg, common.out)
        }
        Command::Generate { common, checkpoint, decode } => {
            let mut cfg = resolve_config(&common)?;
            apply_decode_args(&mut cfg, &decode);
            let ckpt = checkpoint.or_else(|| cfg.checkpoint.clone()).ok_or_else(|| {
                CoreError::InvalidConfig(
                    "generate needs a checkpoint (--checkpoint or paths.checkpoint)".into(),
                )
            })?;
            commands::cmd_generate(&cfg, &ckpt, common.out)
        }
        Command::Eval { common, format, files } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(f) = format {
                cfg.apply_key("report.format", &f)?;
            }
            commands::cmd_eval(&cfg, &files, common.out)
        }
        Command::Sweep { common, kind } => {
            let cfg = resolve_config(&common)?;
            cfg.validate()?;
            let kind = match kind.as_str() {
                "sigma" => SweepKind::Sigma,
                "gamma" => SweepKind::Gamma,
                "plan" => SweepKind::Plan,
                "decode" => SweepKind::Decode,
                other => {
                    return Err(CoreError::InvalidConfig(format!(
                        "unknown sweep kind {other:?} (expected sigma, gamma, plan, or decode)"
                    )))
                }
            };
            commands::cmd_sweep(&cfg, kind, common.out)
        }
        Command::Params { n, d_qkv, d_ff, d_r, out } => {
            commands::cmd_params(n, d_qkv, d_ff, d_r, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                CoreError::InvalidConfig(_) => 2,
                CoreError::Data(_) | CoreError::DataLine { .. } => 3,
                _ => 4,
            };
            ExitCode::from(code)
        }
    }
}
