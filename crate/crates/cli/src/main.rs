mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use danhar::data::{EmbedMode, LabelPolicy};
use danhar::{AttentionVariant, Backbone, Error, Result};

use crate::commands::{EvaluateArgs, ExportArgs, PrepareArgs};
use crate::config::{read_file, Overrides, RunConfig, RunConfigFile};

#[derive(Parser)]
#[command(name = "danhar", version, about = "Dual-attention residual networks for sensor activity recognition")]
struct Cli {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for initialization, shuffling, splitting and synthesis
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Window raw recordings (or synthesize data) into a dataset archive
    Prepare(PrepareCli),
    /// Train one model and write history, checkpoints and metrics
    Train(TrainFlags),
    /// Score a checkpoint on held-out windows
    Evaluate(EvaluateCli),
    /// Train every attention variant for every ablation seed
    Ablate(TrainFlags),
    /// Dump per-window attention weights from a checkpoint
    ExportAttention(ExportCli),
}

#[derive(Args)]
struct PrepareCli {
    /// Input CSV with header subject,label,timestamp,<channels...>
    #[arg(long)]
    input: Option<PathBuf>,
    /// Dataset preset supplying window, step and decimation
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    step: Option<usize>,
    /// majority or sequence
    #[arg(long, value_parser = parse_policy)]
    label_policy: Option<LabelPolicy>,
    #[arg(long)]
    decimate: Option<usize>,
    /// Generate the synthetic benchmark instead of reading a CSV
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 250)]
    per_class: usize,
    #[arg(long, default_value_t = 3)]
    axes: usize,
    /// full or segment
    #[arg(long, default_value = "full", value_parser = parse_mode)]
    mode: EmbedMode,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, value_parser = parse_variant)]
    attention: Option<AttentionVariant>,
    /// plain or residual
    #[arg(long, value_parser = parse_backbone)]
    backbone: Option<Backbone>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvaluateCli {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset archive to score
    #[arg(long)]
    data: Option<PathBuf>,
    /// normalization.json written by train
    #[arg(long)]
    normalization: Option<PathBuf>,
}

#[derive(Args)]
struct ExportCli {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    normalization: Option<PathBuf>,
    /// Comma-separated window indices
    #[arg(long, value_delimiter = ',', required = true)]
    windows: Vec<usize>,
}

fn parse_variant(s: &str) -> std::result::Result<AttentionVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_backbone(s: &str) -> std::result::Result<Backbone, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown backbone '{s}' (expected plain or residual)"))
}

fn parse_policy(s: &str) -> std::result::Result<LabelPolicy, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown label policy '{s}' (expected majority or sequence)"))
}

fn parse_mode(s: &str) -> std::result::Result<EmbedMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown mode '{s}' (expected full or segment)"))
}

fn threads() -> Result<usize> {
    match std::env::var("DANHAR_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("DANHAR_THREADS must be a positive integer, got '{v}'"))),
        },
    }
}

fn resolve(cli: &Cli, flags: &TrainFlags) -> Result<RunConfig> {
    let file = match &cli.config {
        Some(p) => read_file(p)?,
        None => RunConfigFile::default(),
    };
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        attention: flags.attention,
        backbone: flags.backbone,
        epochs: flags.epochs,
        batch_size: flags.batch_size,
        lr: flags.lr,
    };
    RunConfig::resolve(file, &overrides)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let threads = threads()?;
    match &cli.command {
        Command::Prepare(p) => {
            let summary = commands::prepare(PrepareArgs {
                input: p.input.clone(),
                preset: p.preset.clone(),
                width: p.width,
                step: p.step,
                decimate: p.decimate,
                label_policy: p.label_policy,
                synthetic: p.synthetic,
                classes: p.classes,
                per_class: p.per_class,
                axes: p.axes,
                mode: p.mode,
                seed: cli.seed.unwrap_or(0),
                out: cli.out.clone().unwrap_or_else(|| PathBuf::from("data")),
            })?;
            print_json(&summary)
        }
        Command::Train(flags) => {
            let config = resolve(&cli, flags)?;
            print_json(&commands::train_run(&config, threads)?)
        }
        Command::Evaluate(e) => {
            let config = match &cli.config {
                Some(_) => Some(resolve(
                    &cli,
                    &TrainFlags {
                        attention: None,
                        backbone: None,
                        epochs: None,
                        batch_size: None,
                        lr: None,
                    },
                )?),
                None => None,
            };
            let metrics = commands::evaluate(
                EvaluateArgs {
                    checkpoint: e.checkpoint.clone(),
                    data: e.data.clone(),
                    normalization: e.normalization.clone(),
                    out: cli.out.clone(),
                },
                config.as_ref(),
                threads,
            )?;
            print_json(&metrics)
        }
        Command::Ablate(flags) => {
            let config = resolve(&cli, flags)?;
            let rows = commands::ablate(&config, threads)?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            print_json(&serde_json::json!({
                "out": config.out.join("ablation.csv"),
                "runs": rows.len(),
                "failed": failed,
            }))
        }
        Command::ExportAttention(x) => {
            let written = commands::export_attention(ExportArgs {
                checkpoint: x.checkpoint.clone(),
                data: x.data.clone(),
                normalization: x.normalization.clone(),
                windows: x.windows.clone(),
                out: cli.out.clone().unwrap_or_else(|| PathBuf::from("attention")),
            })?;
            print_json(&written)
        }
    }
}

fn fail(category: &str, message: &str) {
    let line = message.replace(['\n', '\r'], " ");
    eprintln!("danhar: error[{category}]: {}", line.trim());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = e.print();
                fail("usage", "missing subcommand");
                return ExitCode::from(2);
            }
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            fail("usage", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            fail(category, &e.to_string());
            ExitCode::from(if category == "config" { 2 } else { 1 })
        }
    }
}
