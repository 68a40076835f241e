//! `gpcl`: data generation, splitting, training, evaluation and embedding export.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpcl_core::sampling::SamplerKind;
use gpcl_core::synth::Preset;
use gpcl_core::trainer::Strategy;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "gpcl", version, about = "Guided point contrastive learning for semi-supervised segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic labeled scenes and a dataset manifest.
    GenData(GenDataArgs),
    /// Partition a dataset into labeled and unlabeled scenes.
    Split(SplitArgs),
    /// Train a model and write checkpoints and a metrics log.
    Train(TrainArgs),
    /// Score a checkpoint or a set of predictions against labeled scenes.
    Eval(EvalArgs),
    /// Dump per-point embeddings of one scene as CSV.
    Embed(EmbedArgs),
    /// Replay the command recorded in a run manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value = "indoor")]
    pub preset: Preset,
    #[arg(long)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scene seed of the first scene; later scenes count up from it.
    #[arg(long, default_value_t = 0)]
    pub first_scene: u64,
    /// Consecutive scenes sharing one group id.
    #[arg(long, default_value_t = 1)]
    pub group_size: usize,
    /// Expected point share of the last class.
    #[arg(long)]
    pub rare_fraction: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset manifest written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep whole groups on one side, cutting at most one.
    #[arg(long)]
    pub sequence_aware: bool,
    /// Dataset manifest whose scenes join the unlabeled side.
    #[arg(long)]
    pub transductive: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Split manifest written by split.
    #[arg(long)]
    pub split: PathBuf,
    /// Dataset manifest scored during training.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// TOML training configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub sampler: Option<SamplerKind>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub total_iters: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Frozen checkpoint producing self-training labels.
    #[arg(long)]
    pub pseudo_from: Option<PathBuf>,
    /// Checkpoint to start from instead of a fresh initialization.
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    /// Continue from the training state saved in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many iterations and save a resumable state.
    #[arg(long)]
    pub stop_at: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset manifest with ground-truth labels.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifest whose labels are taken as predictions, scene by scene.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene file to embed.
    #[arg(long)]
    pub scene: PathBuf,
    /// Output CSV path; the run manifest goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn run(argv: Vec<String>) -> CliResult<()> {
    let cli = Cli::try_parse_from(&argv).map_err(|e| {
        if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
            let _ = e.print();
            std::process::exit(0);
        }
        CliError::Usage(e.to_string())
    })?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a, &argv),
        Command::Split(a) => commands::split(&a, &argv),
        Command::Train(a) => commands::train(&a, &argv),
        Command::Eval(a) => commands::eval(&a, &argv),
        Command::Embed(a) => commands::embed(&a, &argv),
        Command::Rerun(a) => {
            let recorded: manifest::RunManifest = manifest::read_json(&a.manifest)?;
            if recorded.args.get(1).map(String::as_str) == Some("rerun") {
                return Err(CliError::Usage("a rerun manifest cannot be replayed".into()));
            }
            std::env::set_current_dir(&recorded.cwd).map_err(|e| CliError::io(&recorded.cwd, e))?;
            run(recorded.args)
        }
    }
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().trim_end());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
