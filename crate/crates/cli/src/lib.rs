//! Command-line front end for the scenediff pipeline.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, bad config),
//! 2 on runtime failures.

pub mod commands;
pub mod config;
pub mod viz;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use commands::*;
use scenediff::diffusion::Stage;
use scenediff::eval::AblationKind;

pub const COMMANDS: [&str; 10] =
    ["gen-data", "pretrain", "align", "finetune", "train-ar", "decode", "eval", "ablate", "trace-viz", "smoke"];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(anyhow::anyhow!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// Prefixes the message with a pipeline stage name; always a runtime error.
    pub fn in_stage(self, stage: &str) -> Self {
        CliError::Runtime(anyhow::anyhow!("stage {stage}: {self}"))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "scenediff",
    version,
    about = "Masked-diffusion scene description: data, training, decoding, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output root (created if missing; one run at a time).
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file with per-command sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    /// caption, detect, ground, classify, or mixed.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coord_bins: Option<u32>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long, conflicts_with = "epochs")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_frac: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to start from.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args, Serialize)]
pub struct DecoderFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Number of refinement steps N.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timesteps: Option<usize>,
    #[arg(long, value_parser = ["low-confidence", "random"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    /// diffusion or ar.
    #[arg(long, value_parser = ["diffusion", "ar"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paradigm: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: GenDataFlags,
    },
    /// Text-only pretraining of the trunk.
    Pretrain(TrainArgs),
    /// Projector alignment (only the projector is trained).
    Align(TrainArgs),
    /// Full instruction tuning of every tensor.
    Finetune(TrainArgs),
    /// Train the causal baseline.
    TrainAr(TrainArgs),
    /// Decode instances and write traces.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        dec: DecoderFlags,
        /// Generated length (defaults to the task template length).
        #[arg(long)]
        gen_len: Option<usize>,
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        dec: DecoderFlags,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run an ablation and write ablation_<kind>.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["remask-strategy", "timesteps", "paradigm"])]
        kind: Option<String>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ar_model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        timesteps: Option<usize>,
        #[arg(long)]
        random_runs: Option<usize>,
    },
    /// Render a decode trace by finalization phase.
    TraceViz {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_parser = ["ansi", "svg"], default_value = "ansi")]
        mode: String,
        /// Write trace.svg here instead of standard output (svg mode).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole chain at miniature scale.
    Smoke {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Overrides<'a, F: Serialize> {
    #[serde(flatten)]
    flags: &'a F,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

fn extra(pairs: &[(&str, Option<serde_json::Value>)]) -> serde_json::Map<String, serde_json::Value> {
    pairs.iter().filter_map(|(k, v)| v.clone().map(|v| (k.to_string(), v))).collect()
}

fn train_cmd(stage: Stage, a: &TrainArgs) -> Result<(), CliError> {
    let s: TrainSettings = config::resolve(a.common.config.as_deref(), stage_command(stage), &a.flags)?;
    train_stage(stage, &s, &a.data, a.model.as_deref(), &a.common.out)?;
    Ok(())
}

pub fn dispatch(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let print = |out: &mut dyn Write, s: &str| out.write_all(s.as_bytes()).map_err(|e| CliError::Runtime(e.into()));
    match cli.command {
        Command::GenData { common, flags } => {
            let s: GenDataSettings = config::resolve(common.config.as_deref(), "gen-data", &flags)?;
            gen_data(&s, &common.out)?;
        }
        Command::Pretrain(a) => train_cmd(Stage::TextPretrain, &a)?,
        Command::Align(a) => train_cmd(Stage::Align, &a)?,
        Command::Finetune(a) => train_cmd(Stage::Full, &a)?,
        Command::TrainAr(a) => train_cmd(Stage::ArBaseline, &a)?,
        Command::Decode { common, model, data, dec, gen_len, index, count } => {
            let o = Overrides {
                flags: &dec,
                extra: extra(&[
                    ("gen_len", gen_len.map(Into::into)),
                    ("index", index.map(Into::into)),
                    ("count", count.map(Into::into)),
                ]),
            };
            let s: DecodeSettings = config::resolve(common.config.as_deref(), "decode", &o)?;
            decode_cmd(&s, &model, &data, &common.out)?;
        }
        Command::Eval { common, model, data, dec, limit } => {
            let o = Overrides { flags: &dec, extra: extra(&[("limit", limit.map(Into::into))]) };
            let s: EvalSettings = config::resolve(common.config.as_deref(), "eval", &o)?;
            let report = eval_cmd(&s, &model, &data, &common.out)?;
            print(stdout, &report.to_csv())?;
        }
        Command::Ablate { common, kind, model, ar_model, data, seed, timesteps, random_runs } => {
            let kind = kind.map(|k| serde_json::to_value(AblationKind::parse(&k)).unwrap_or_default());
            let o = extra(&[
                ("kind", kind),
                ("seed", seed.map(Into::into)),
                ("timesteps", timesteps.map(Into::into)),
                ("random_runs", random_runs.map(Into::into)),
            ]);
            let s: AblateSettings = config::resolve(common.config.as_deref(), "ablate", &o)?;
            let text = ablate_cmd(&s, &model, ar_model.as_deref(), &data, &common.out)?;
            print(stdout, &text)?;
        }
        Command::TraceViz { trace, mode, out } => {
            let mode = if mode == "svg" { VizMode::Svg } else { VizMode::Ansi };
            if let Some(text) = trace_viz_cmd(&trace, mode, out.as_deref())? {
                print(stdout, &text)?;
            }
        }
        Command::Smoke { seed, out, config } => {
            let s: SmokeSettings =
                config::resolve(config.as_deref(), "smoke", &extra(&[("seed", seed.map(Into::into))]))?;
            let report = smoke(&s, &out)?;
            print(stdout, &report.to_csv())?;
        }
    }
    Ok(())
}

/// Parses `argv`, runs the command, reports errors on `stderr`, and
/// returns the process exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = stderr.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if let CliError::Usage(_) = e {
                let _ = writeln!(stderr, "\nRun `scenediff --help` for usage.");
            }
            e.exit_code()
        }
    }
}
