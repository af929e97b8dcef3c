//! One binary for the whole desk-scale pipeline: synthesize multi-domain
//! volumes, preprocess raw CT scans, train the multi-dataset detector, run
//! tiled detection, score FROC, and inspect attention configurations.
//!
//! Every tunable option resolves flag > `SGDA_*` environment variable >
//! `--config` JSON key; input and output paths are flags only. Runs that
//! produce file artifacts echo their effective configuration to
//! `config.resolved.json` in the output location, and that file can be fed
//! back through `--config` to repeat the run.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sgda_core::Error;

#[derive(Parser)]
#[command(
    name = "sgda",
    version,
    about = "Slice-grouped domain attention pipeline: synthetic domains, CT \
             preprocessing, detector training, detection, and FROC scoring"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Resample, window, crop and pad a CT scan (or a directory of scans)
    Preprocess(PreprocessArgs),
    /// Score a candidate file against annotations and emit the FROC curve
    Eval(EvalArgs),
    /// Train the multi-dataset detector on a directory of domain volumes
    Train(TrainArgs),
    /// Generate synthetic domain volumes with nodule annotations
    Synth(SynthArgs),
    /// Run the finite-difference gradient suite and print its table
    Gradcheck(GradcheckArgs),
    /// Print the learnable-scalar count of an attention configuration
    Params(ParamsArgs),
    /// Export mean soft-assignment vectors for a checkpoint over a data set
    Assignments(AssignmentsArgs),
    /// Run tiled detection and write per-domain candidate files
    Detect(DetectArgs),
}

#[derive(Args)]
pub(crate) struct PreprocessArgs {
    /// Input MHD header, or a directory of .mhd scans
    #[arg(long)]
    pub input: PathBuf,
    /// Lung-mask MHD header; for a directory input, a directory of masks
    /// with matching file names
    #[arg(long)]
    pub mask: PathBuf,
    /// Output directory for .sgdt tensors and coordinate sidecars
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads over scans (directory input)
    #[arg(long)]
    pub jobs: Option<usize>,
    /// JSON file supplying defaults for the tunable flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct EvalArgs {
    /// Candidate CSV (seriesuid,coordX,coordY,coordZ,probability)
    #[arg(long)]
    pub candidates: PathBuf,
    /// Annotation CSV
    #[arg(long)]
    pub annotations: PathBuf,
    /// Number of scans the candidates were drawn from
    #[arg(long)]
    pub scans: Option<usize>,
    /// Output path for the FROC curve CSV
    #[arg(long)]
    pub out: PathBuf,
    /// Annotation layout: center_diameter or corner_pair
    #[arg(long)]
    pub format: Option<String>,
    /// Worker threads for candidate matching
    #[arg(long)]
    pub jobs: Option<usize>,
    /// JSON file supplying defaults for the tunable flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct TrainArgs {
    /// Data directory: one subdirectory per domain with vol_*.mhd files and
    /// an annotations.csv
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoint, loss log, and resolved config
    #[arg(long)]
    pub out: PathBuf,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Optimizer steps per epoch
    #[arg(long)]
    pub steps: Option<usize>,
    /// Patches per optimizer step
    #[arg(long)]
    pub batch: Option<usize>,
    /// Cubic patch edge in voxels (divisible by 4)
    #[arg(long)]
    pub patch: Option<usize>,
    /// Base learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated epochs at which the learning rate drops tenfold
    #[arg(long)]
    pub lr_drops: Option<String>,
    /// SGD momentum
    #[arg(long)]
    pub momentum: Option<f64>,
    /// L2 weight decay
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Seed for init and patch sampling
    #[arg(long)]
    pub seed: Option<u64>,
    /// Enable domain attention on the residual blocks (true/false)
    #[arg(long)]
    pub sgda: Option<bool>,
    /// Comma-separated channel widths of the three encoder stages
    #[arg(long)]
    pub channels: Option<String>,
    /// Adapter count for the attention blocks
    #[arg(long)]
    pub adapters: Option<usize>,
    /// JSON file supplying defaults for the tunable flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct SynthArgs {
    /// Output directory; one subdirectory per domain
    #[arg(long)]
    pub out: PathBuf,
    /// Volumes per domain
    #[arg(long)]
    pub volumes: Option<usize>,
    /// Master seed for the per-volume seed stream
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads over volumes
    #[arg(long)]
    pub jobs: Option<usize>,
    /// JSON array of domain specs; omitted, three built-in sites are used
    #[arg(long)]
    pub domains: Option<PathBuf>,
    /// JSON file supplying defaults for the tunable flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct GradcheckArgs {
    /// Seed for the probe inputs and weights
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optional directory for the resolved config echo
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file supplying defaults for the tunable flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct ParamsArgs {
    /// Channel count C of the hosting feature map
    #[arg(long)]
    pub channels: Option<usize>,
    /// Slice groups per direction
    #[arg(long)]
    pub groups: Option<usize>,
    /// Adapters in the universal bank
    #[arg(long)]
    pub adapters: Option<usize>,
    /// Excitation bottleneck reduction r
    #[arg(long)]
    pub reduction: Option<usize>,
    /// Comma-separated subset of axial,coronal,sagittal
    #[arg(long)]
    pub directions: Option<String>,
    /// Fusion of the directional maps: cross_attention or mean_only
    #[arg(long)]
    pub fuse: Option<String>,
    /// Run cross attention per depth group (true/false)
    #[arg(long)]
    pub grouped_ca: Option<bool>,
    /// Optional directory for the resolved config echo
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file supplying defaults for the tunable flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct AssignmentsArgs {
    /// Checkpoint directory written by train
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Data directory: one subdirectory per domain with vol_*.mhd files
    #[arg(long)]
    pub data: PathBuf,
    /// Output path for the mean-assignment JSON
    #[arg(long)]
    pub out: PathBuf,
    /// Cubic inference tile edge; volume extents must divide by it
    #[arg(long)]
    pub tile: Option<usize>,
    /// Worker threads over volumes
    #[arg(long)]
    pub jobs: Option<usize>,
    /// JSON file supplying defaults for the tunable flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct DetectArgs {
    /// Checkpoint directory written by train
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Data directory: one subdirectory per domain with vol_*.mhd files
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; candidates.csv per domain
    #[arg(long)]
    pub out: PathBuf,
    /// Cubic inference tile edge; volume extents must divide by it
    #[arg(long)]
    pub tile: Option<usize>,
    /// Heatmap probability floor for decoded candidates
    #[arg(long)]
    pub prob_floor: Option<f64>,
    /// Worker threads over volumes
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Also export mean soft assignments to this JSON path
    #[arg(long)]
    pub assignments: Option<PathBuf>,
    /// JSON file supplying defaults for the tunable flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn run(cli: Cli) -> sgda_core::Result<()> {
    match cli.cmd {
        Cmd::Preprocess(a) => commands::preprocess(a),
        Cmd::Eval(a) => commands::eval(a),
        Cmd::Train(a) => commands::train(a),
        Cmd::Synth(a) => commands::synth(a),
        Cmd::Gradcheck(a) => commands::gradcheck(a),
        Cmd::Params(a) => commands::params(a),
        Cmd::Assignments(a) => commands::assignments(a),
        Cmd::Detect(a) => commands::detect(a),
    }
}

/// usage/config/shape -> 2, parse/data/io/json -> 3, numeric -> 4.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Shape(_) => 2,
        Error::Parse(_) | Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
