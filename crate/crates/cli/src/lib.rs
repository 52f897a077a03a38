//! Command-line driver: corpus generation, staged training, preference
//! optimization, evaluation, latency benchmarks and ablation grids. Every
//! command writes a run manifest next to its outputs.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{io_error, require_input, CliResult};
use crate::manifest::{unix_now, RunManifest, RunRecord};
use crate::report::Format;

#[derive(Parser, Debug, Clone)]
#[command(name = "unitforge", version, about = "Speech-unit decoder training and evaluation toolkit")]
pub struct Cli {
    /// Overrides the seed of the command's configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Command configuration: a JSON corpus spec for gen-data, key=value
    /// settings otherwise.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for ablation cells.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub workers: u16,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Write reports without printing them.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Generate every synthetic corpus from a spec.
    GenData {
        /// JSON corpus spec; defaults to --config, then built-in defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Run one training stage.
    Train {
        #[arg(value_enum)]
        stage: TrainStage,
        /// Corpus directory from gen-data, or a single JSONL file.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Backbone checkpoint from an earlier stage.
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// NAR decoder checkpoint to start preference optimization from.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long, value_enum)]
        metric: Metric,
        /// Decoder checkpoint (backbone checkpoint for zero-shot).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Second decoder to report next to --checkpoint (emotion-acc, pref-acc).
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// partition-check: output frames.
        #[arg(long, default_value_t = 2)]
        frames: usize,
        /// partition-check: vocabulary size including the blank.
        #[arg(long, default_value_t = 2)]
        vocab: usize,
    },
    /// Compare sequential decoding steps of an AR and a NAR decoder.
    BenchLatency {
        #[arg(long)]
        ar: PathBuf,
        #[arg(long)]
        nar: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        /// Supervised JSONL (or corpus directory) supplying the contexts.
        #[arg(long)]
        contexts: PathBuf,
        /// Output length from which contexts count towards the gated median.
        #[arg(long, default_value_t = 5)]
        min_len: usize,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train and evaluate a grid of NAR decoders.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        experts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "2")]
        layers: Vec<usize>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "on,off")]
        tgm: Vec<Toggle>,
        /// Seeds per (experts, layers) cell.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Fraction of the supervised corpus held out for UER.
        #[arg(long, default_value_t = 0.125)]
        holdout: f64,
    },
    /// Generate units for every context in a file.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        contexts: PathBuf,
    },
    /// Rerun the command recorded in a manifest and compare its outputs.
    Replay { manifest: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainStage {
    Pretrain,
    #[value(name = "align-1")]
    Align1,
    #[value(name = "align-2")]
    Align2,
    #[value(name = "align-3")]
    Align3,
    DecoderNar,
    DecoderAr,
    Dpo,
}

impl TrainStage {
    pub fn name(self) -> &'static str {
        match self {
            TrainStage::Pretrain => "pretrain",
            TrainStage::Align1 => "align-1",
            TrainStage::Align2 => "align-2",
            TrainStage::Align3 => "align-3",
            TrainStage::DecoderNar => "decoder-nar",
            TrainStage::DecoderAr => "decoder-ar",
            TrainStage::Dpo => "dpo",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Uer,
    EmotionAcc,
    PrefAcc,
    ZeroShot,
    PartitionCheck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    pub fn on(self) -> bool {
        self == Toggle::On
    }
}

/// Settings shared by every command.
#[derive(Clone, Debug)]
pub struct Ctx {
    pub seed: Option<u64>,
    pub config_path: Option<PathBuf>,
    pub config_text: Option<String>,
    pub out: PathBuf,
    pub workers: usize,
    pub format: Format,
    pub quiet: bool,
}

impl Ctx {
    fn from_cli(cli: &Cli) -> CliResult<Self> {
        let config_text = match &cli.config {
            None => None,
            Some(p) => {
                require_input(p)?;
                Some(fs::read_to_string(p).map_err(|e| io_error(p, e))?)
            }
        };
        Ok(Ctx {
            seed: cli.seed,
            config_path: cli.config.clone(),
            config_text,
            out: cli.out.clone(),
            workers: cli.workers as usize,
            format: cli.format,
            quiet: cli.quiet,
        })
    }
}

/// Name used for the manifest file, unique per kind of run.
pub fn command_name(cmd: &Command) -> String {
    match cmd {
        Command::GenData { .. } => "gen-data".into(),
        Command::Train { stage, .. } => format!("train-{}", stage.name()),
        Command::Eval { metric, .. } => {
            let m = metric.to_possible_value().expect("metric names are visible");
            format!("eval-{}", m.get_name())
        }
        Command::BenchLatency { .. } => "bench-latency".into(),
        Command::Ablate { .. } => "ablate".into(),
        Command::Decode { .. } => "decode".into(),
        Command::Replay { .. } => "replay".into(),
    }
}

/// Runs a parsed command line. `args` are the raw arguments after the
/// program name, recorded in the manifest.
pub fn execute(cli: &Cli, args: &[String]) -> CliResult<RunManifest> {
    let started = unix_now();
    let ctx = Ctx::from_cli(cli)?;
    fs::create_dir_all(&ctx.out).map_err(|e| io_error(&ctx.out, e))?;
    let mut record = RunRecord {
        seed: ctx.seed,
        ..RunRecord::default()
    };
    if let Command::Replay { manifest } = &cli.command {
        return commands::replay(&ctx, manifest);
    }
    let text = commands::dispatch(&ctx, &cli.command, &mut record)?;
    let name = command_name(&cli.command);
    let manifest = RunManifest::build(&name, args, ctx.config_path.as_deref(), &ctx.out, &record, started)?;
    manifest.write(&ctx.out)?;
    if !text.is_empty() && !ctx.quiet {
        print!("{text}");
    }
    Ok(manifest)
}

/// Parses `args` (without the program name) and runs them.
pub fn run_args(args: &[String]) -> CliResult<RunManifest> {
    let argv = std::iter::once("unitforge".to_string()).chain(args.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(|e| error::CliError::new(error::exit::MISSING_INPUT, e.to_string()))?;
    execute(&cli, args)
}

