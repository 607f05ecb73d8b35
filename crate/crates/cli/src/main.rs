//! Command-line front end: dataset generation, the two training stages,
//! translation, evaluation and the gradient-check battery.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use voxtrans_core::VoxError;

#[derive(Parser)]
#[command(
    name = "voxtrans",
    version,
    about = "Two-stage latent-diffusion translation between 3D image modalities"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Workstation-sized models and phantom data (the default)
    Desk,
    /// The published full-size hyperparameters; not runnable on one machine
    PaperScale,
}

/// Flags shared by every pipeline command.
#[derive(Args)]
pub struct CommonArgs {
    /// Configuration file (TOML); missing sections fall back to the desk
    /// preset
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    pub config: Option<PathBuf>,

    /// Built-in configuration preset
    #[arg(long, value_enum, value_name = "NAME")]
    pub preset: Option<Preset>,

    /// Overrides the configured seed
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,

    /// Accepted for script compatibility; runs are always single-threaded
    /// and fully seeded, so this changes nothing
    #[arg(long)]
    pub deterministic: bool,

    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainAeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct TrainLdmArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// First-stage checkpoint to freeze
    #[arg(long, value_name = "PATH")]
    pub stage1: PathBuf,
}

#[derive(Args)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// First-stage checkpoint
    #[arg(long, value_name = "PATH")]
    pub stage1: PathBuf,

    /// Second-stage checkpoint; required when diffusion is enabled
    #[arg(long, value_name = "PATH")]
    pub stage2: Option<PathBuf>,

    /// Source volume (.rvol)
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,

    /// Modality the input volume belongs to
    #[arg(long, value_name = "ID")]
    pub source: String,

    /// Target modality; repeat for one-to-many translation
    #[arg(long = "target", value_name = "ID", required = true)]
    pub targets: Vec<String>,

    /// Also export axial and sagittal mid-slice graymaps
    #[arg(long)]
    pub slices: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Directory of predicted volumes (*.rvol)
    #[arg(long, value_name = "DIR")]
    pub predictions: PathBuf,

    /// Directory of reference volumes with matching file names
    #[arg(long, value_name = "DIR")]
    pub references: PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Probe seed for the randomized primitive cases
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub seed: u64,

    /// Negative control: corrupt the named primitive's adjoint and verify
    /// the battery reports exactly that failure
    #[arg(long, value_name = "OP")]
    pub corrupt: Option<String>,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the first-stage compression autoencoder
    TrainAe(TrainAeArgs),
    /// Train the second-stage latent denoiser against frozen first-stage
    /// weights
    TrainLdm(TrainLdmArgs),
    /// Translate a volume into one or more target modalities
    Translate(TranslateArgs),
    /// Score predicted volumes against references (PSNR, NMSE, SSIM)
    Evaluate(EvaluateArgs),
    /// Verify every differentiable primitive against finite differences
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset tree (volumes plus manifest)
    GenData(GenDataArgs),
}

fn exit_code(e: &VoxError) -> u8 {
    match e {
        VoxError::Config(_) => 1,
        VoxError::Numeric(_) => 3,
        VoxError::Checkpoint(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::TrainAe(a) => commands::train_ae(a),
        Cmd::TrainLdm(a) => commands::train_ldm(a),
        Cmd::Translate(a) => commands::translate(a),
        Cmd::Evaluate(a) => commands::evaluate(a),
        Cmd::Gradcheck(a) => commands::gradcheck(a),
        Cmd::GenData(a) => commands::gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
