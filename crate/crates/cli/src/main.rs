//! `crystvox`: voxelize crystals, train the VAE + U-Net, and reconstruct,
//! segment, evaluate, interpolate, sample and score density grids.

mod commands;
mod data;
mod error;
mod record;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "crystvox", version, about = "Crystal voxelization, generative modeling and segmentation")]
pub struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for voxelization and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Directory receiving all outputs.
    #[arg(long, global = true, default_value = "crystvox-out")]
    pub out: PathBuf,
    /// Floating-point type for network computations; f64 is the bit-reproducible check mode.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Rep {
    Single,
    Repeated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SegLossArg {
    Bce,
    SoftmaxCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CentroidArg {
    Unweighted,
    Density,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Dataset manifests.
    #[command(subcommand)]
    Manifest(ManifestCmd),
    /// Write density, species and truth-atom files for every manifest sample.
    Voxelize(VoxelizeArgs),
    /// Jointly train the VAE and the segmentation U-Net.
    Train(TrainArgs),
    /// Train a realism discriminator against a trained VAE.
    TrainDisc(TrainDiscArgs),
    /// Encode and decode density grids.
    Reconstruct(ReconstructArgs),
    /// Turn density grids (with a model) or species grids (without) into atom lists.
    Segment(SegmentArgs),
    /// Compare predicted and true atom lists.
    Evaluate(EvaluateArgs),
    /// Decode evenly spaced points on the segment between two encoded grids.
    Interpolate(InterpolateArgs),
    /// Decode codes drawn from the prior, optionally conditioned on a max density.
    Sample(SampleArgs),
    /// Score density grids with a trained discriminator.
    Discriminate(DiscriminateArgs),
    /// Finite-difference gradient checks for every layer.
    Gradcheck(GradcheckArgs),
    /// Fast oracle checks across all modules.
    Selftest,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Manifest(_) => "manifest",
            Command::Voxelize(_) => "voxelize",
            Command::Train(_) => "train",
            Command::TrainDisc(_) => "train-disc",
            Command::Reconstruct(_) => "reconstruct",
            Command::Segment(_) => "segment",
            Command::Evaluate(_) => "evaluate",
            Command::Interpolate(_) => "interpolate",
            Command::Sample(_) => "sample",
            Command::Discriminate(_) => "discriminate",
            Command::Gradcheck(_) => "gradcheck",
            Command::Selftest => "selftest",
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum ManifestCmd {
    /// Parse crystal files and write a train/test manifest.
    Build(ManifestBuildArgs),
}

#[derive(Args, Debug)]
pub struct ManifestBuildArgs {
    /// Crystal files or directories containing `.cif` files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Rep::Single)]
    pub rep: Rep,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 3)]
    pub rotations: usize,
    #[arg(long, default_value_t = 2)]
    pub offsets: usize,
    /// Cells with a side at or above this length (Å) are dropped.
    #[arg(long, default_value_t = 10.0)]
    pub max_side: f64,
}

#[derive(Args, Debug)]
pub struct VoxelizeArgs {
    pub manifest: PathBuf,
    /// Overrides the manifest's representation.
    #[arg(long, value_enum)]
    pub rep: Option<Rep>,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
}

#[derive(Args, Debug, Clone)]
pub struct DataSource {
    /// Dataset manifest; the train split is used.
    #[arg(long, conflicts_with = "toy")]
    pub manifest: Option<PathBuf>,
    /// Use this many synthetic toy cells instead of a manifest.
    #[arg(long)]
    pub toy: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataSource,
    /// Architecture preset: paper or desk.
    #[arg(long, default_value = "desk")]
    pub model: String,
    #[arg(long, default_value_t = 1e-3)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: u64,
    /// Condition the latent code on each sample's max density.
    #[arg(long)]
    pub conditioned: bool,
    #[arg(long, value_enum, default_value_t = SegLossArg::Bce)]
    pub seg_loss: SegLossArg,
    /// Checkpoint file name inside the output directory.
    #[arg(long, default_value = "model.vxck")]
    pub ckpt_out: String,
    /// Print a progress line every this many steps (0 = never).
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
}

#[derive(Args, Debug)]
pub struct TrainDiscArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataSource,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: u64,
    #[arg(long, default_value = "disc.vxck")]
    pub disc_out: String,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Density grid files.
    #[arg(long = "in", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    /// Model whose U-Net segments density inputs; omit to segment species grids directly.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long = "in", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub min_cluster: usize,
    #[arg(long, value_enum, default_value_t = CentroidArg::Unweighted)]
    pub centroid: CentroidArg,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Predicted atom lists (`Z x y z n` text or JSON).
    #[arg(long, required = true, num_args = 1..)]
    pub pred: Vec<PathBuf>,
    /// True atom lists, paired with `--pred` by position.
    #[arg(long, required = true, num_args = 1..)]
    pub truth: Vec<PathBuf>,
    /// Use minimum-image distances in a cubic box of this period (Å).
    #[arg(long)]
    pub period: Option<f64>,
    /// Also write CSV tables.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Target normalized max density; the prior code is scaled by it.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Args, Debug)]
pub struct DiscriminateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub disc_ckpt: PathBuf,
    #[arg(long = "in", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random shapes per layer.
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.record("crystvox"));
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    let name = cli.command.name();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.record(name));
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
