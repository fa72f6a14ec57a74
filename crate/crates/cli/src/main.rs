mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "dve", version, about = "Train and evaluate dense landmark embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic articulated-arm dataset (train and test parts).
    GenData(GenDataArgs),
    /// Train an embedder from a config file.
    Train(TrainArgs),
    /// Continue training a checkpoint without supervision on another dataset.
    Finetune(FinetuneArgs),
    /// Run an evaluation protocol on a checkpoint.
    Eval(EvalArgs),
    /// Draw query points on one image and their matches on another.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
pub struct OutputArgs {
    /// Parent directory for timestamped run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Exact run directory to use instead of a timestamped one.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Config file whose `[arm]` section supplies defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of held-out instances in the test part.
    #[arg(long)]
    pub test_instances: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, required_unless_present = "resume")]
    pub config: Option<PathBuf>,
    /// Continue the run in this directory from its latest checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override `data.root`.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    MatchSame,
    MatchDiff,
    Regress,
    Limited,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub protocol: Protocol,
    /// Config file with `[data]` and `[eval]` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root; an arm directory unless `--face` is given.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Face benchmark name (celeba, mafl, aflw_m, aflw_r, 300w).
    #[arg(long)]
    pub face: Option<String>,
    #[arg(long)]
    pub n_pairs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Annotation counts for `limited`, e.g. `1,5,all`.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<String>>,
    #[arg(long)]
    pub n_seeds: Option<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    /// Query points in pixels of the model-sized image A, `x,y;x,y;...`.
    #[arg(long)]
    pub points: Option<String>,
    /// Number of evenly spread queries when `--points` is absent.
    #[arg(long, default_value_t = 5)]
    pub n_points: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use dve_core::Error;
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::NonFinite { .. } | Error::AllMasked) => 4,
        Some(_) => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Eval(a) => commands::eval(a),
        Command::Visualize(a) => commands::visualize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
