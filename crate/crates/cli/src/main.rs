use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vseg::network::NetworkVariant;

mod commands;
mod failure;

use failure::Failure;

/// Brain tissue segmentation with triplanar dilated and volumetric CNNs.
#[derive(Debug, Parser)]
#[command(name = "vseg", version)]
struct Cli {
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate labelled synthetic phantoms.
    Phantom(PhantomArgs),
    /// Train a model on every labelled case in a dataset directory.
    Train(TrainArgs),
    /// Segment cases with a trained model.
    Segment(SegmentArgs),
    /// Dice overlap of segmentations against reference labels.
    Evaluate(EvaluateArgs),
    /// Architecture report: receptive fields, layer shapes, parameter counts.
    Inspect(InspectArgs),
    /// Mid-axial PNG slices of a case and its labels.
    Preview(PreviewArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Edge length `N` or `DxHxW`.
    #[arg(long)]
    size: Option<String>,
    /// Seed of the first phantom; phantom `i` uses `seed + i`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    contrast_gap: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    smoothness: Option<usize>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Case name prefix.
    #[arg(long, default_value = "phantom")]
    name: String,
    /// key = value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory with labelled cases.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the model and run metadata.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<NetworkVariant>,
    /// Adds the volumetric branch (selects the combined variant).
    #[arg(long)]
    with_3d: bool,
    /// Seeds initialisation, sampling and dropout.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    /// 50,000 samples per class per image instead of the 2,000 default.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Checkpoint every N epochs into `<out>/checkpoints`.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// key = value file (a previous run.txt works); flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory; writes `<case>_seg.nii`.
    #[arg(long)]
    out: PathBuf,
    /// Restrict to these cases (default: all).
    #[arg(long = "case")]
    cases: Vec<String>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Directory holding `<case>_seg.nii` files.
    #[arg(long)]
    seg: PathBuf,
    /// Dataset directory with reference labels.
    #[arg(long)]
    data: PathBuf,
    /// Also write the scores as key = value.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long, default_value = "combined")]
    variant: NetworkVariant,
}

#[derive(Debug, Args)]
struct PreviewArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    case: String,
    /// Label map to draw (default: the case's reference labels).
    #[arg(long)]
    seg: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::user("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::internal(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Train(a) => commands::train(a),
        Command::Segment(a) => commands::segment(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Preview(a) => commands::preview(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
