mod commands;
mod manifest;
mod outputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Learned recurrent gradient descent for non-blind deconvolution.
#[derive(Parser, Debug)]
#[command(name = "rgdn", version = env!("RGDN_BUILD_ID"))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Blur and noise a directory of sharp PNGs into a triplet store.
    Synth(SynthArgs),
    /// Train an optimizer on a triplet store.
    Train(TrainArgs),
    /// Restore images with a trained optimizer.
    Deconv(DeconvArgs),
    /// Score restored images against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory of sharp PNG images.
    #[arg(long)]
    pub truth_dir: PathBuf,
    /// Output triplet store.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub kernels_per_image: usize,
    #[arg(long, default_value_t = 0.003)]
    pub sigma_lo: f64,
    #[arg(long, default_value_t = 0.015)]
    pub sigma_hi: f64,
    /// Kernel sides to draw from.
    #[arg(long, value_delimiter = ',', default_value = "11,21,31,41")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Triplet store produced by `synth`.
    #[arg(long)]
    pub store: PathBuf,
    /// Output directory for the checkpoint, log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Unrolled steps per sample.
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Per-step supervision weights; defaults to all ones.
    #[arg(long, value_delimiter = ',')]
    pub kappa: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Intermediate feature channels of each sub-network.
    #[arg(long, default_value_t = 64)]
    pub features: usize,
    /// Random square training crop in pixels.
    #[arg(long)]
    pub crop: Option<usize>,
    /// Write a checkpoint every this many iterations.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Train without the regularizer network R.
    #[arg(long)]
    pub no_r: bool,
    /// Replace H by the identity.
    #[arg(long)]
    pub no_h: bool,
    /// Replace D by the identity.
    #[arg(long)]
    pub no_d: bool,
}

#[derive(Args, Debug)]
pub struct DeconvArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Observed PNG; use `--store` instead to restore a whole triplet store.
    #[arg(long, conflicts_with = "store", required_unless_present = "store")]
    pub input: Option<PathBuf>,
    /// Blur kernel text file for `--input`.
    #[arg(long, conflicts_with = "store")]
    pub kernel: Option<PathBuf>,
    /// Ground-truth PNG for `--input`; adds PSNR to the trace.
    #[arg(long, conflicts_with = "store")]
    pub truth: Option<PathBuf>,
    /// Triplet store whose observations are restored.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f64,
    #[arg(long, default_value_t = 30)]
    pub max_iters: usize,
    /// Ignore any kernel and restore with `A = I`.
    #[arg(long)]
    pub denoise: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of restored PNGs.
    #[arg(long)]
    pub restored: PathBuf,
    /// Directory of truth PNGs with matching file names.
    #[arg(long, conflicts_with = "store", required_unless_present = "store")]
    pub truth: Option<PathBuf>,
    /// Triplet store supplying truth images and kernel sides.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Border to discard: `auto` (half the kernel side) or pixels.
    #[arg(long, default_value = "auto")]
    pub crop: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = commands::init_threads() {
        log::error!("{e:#}");
        return ExitCode::FAILURE;
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Deconv(a) => commands::deconv(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
