//! `xmodal`: synthetic data generation, training, indexing, querying and
//! evaluation for the cross-modal retrieval engine.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 3 for
//! runtime or numeric failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use xmodal_core::pairgen::Modality;

#[derive(Debug, Parser)]
#[command(name = "xmodal", version, about = "Cross-modal (text/sketch to image) retrieval")]
pub struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// JSON configuration file; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenSynth(GenSynthArgs),
    /// Split, generate pairs and train; writes a checkpoint and loss curve.
    Train(TrainArgs),
    /// Embed a split of the dataset into an image index.
    Index(IndexArgs),
    /// Rank the index for one or more query feature files.
    Query(QueryArgs),
    /// Evaluate test-split queries against an index.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Text,
    Sketch,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Text => Modality::Text,
            ModalityArg::Sketch => Modality::Sketch,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub images_per_class: Option<usize>,
    /// Two-object images, one combined class per pair of classes.
    #[arg(long)]
    pub multi: bool,
    #[arg(long)]
    pub object_cells: Option<usize>,
    #[arg(long)]
    pub grid_h: Option<usize>,
    #[arg(long)]
    pub grid_w: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub noise_image: Option<f64>,
    #[arg(long)]
    pub noise_text: Option<f64>,
    #[arg(long)]
    pub noise_sketch: Option<f64>,
    #[arg(long)]
    pub text_dim: Option<usize>,
    #[arg(long)]
    pub sketch_dim: Option<usize>,
    /// Standard deviation of the query projection map entries.
    #[arg(long)]
    pub projection_std: Option<f64>,
    #[arg(long)]
    pub sketches_per_image: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub modality: Option<ModalityArg>,
    /// Two-object training pairs.
    #[arg(long)]
    pub multi: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub n_max: Option<usize>,
    /// Sketch combinations per two-object training image.
    #[arg(long)]
    pub n_m: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub attn: Option<usize>,
    #[arg(long)]
    pub query_hidden: Option<usize>,
    #[arg(long)]
    pub embed: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Items to index; the test split is recomputed from the seed.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Attention steps per image; defaults to the checkpoint's value.
    #[arg(long)]
    pub n_max: Option<usize>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Required unless `--embedded` is given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Query feature tensor file; repeat for multi-object queries.
    #[arg(long = "query-file", required = true)]
    pub query_files: Vec<PathBuf>,
    /// The query files already hold joint-space embeddings.
    #[arg(long)]
    pub embedded: bool,
    /// Number of results printed.
    #[arg(short, long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long, value_enum)]
    pub modality: Option<ModalityArg>,
    #[arg(long)]
    pub multi: bool,
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 3 })
        }
    }
}
