mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Unpaired image translation on images of any size, trained on random
/// crops and applied tile by tile.
#[derive(Parser, Debug)]
#[command(name = "tilegan", version, propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a translation model on two image domains
    Train(TrainArgs),
    /// Translate an image with a trained model, tile by tile
    Translate(TranslateArgs),
    /// Measure peak tensor memory of whole-image and tiled translation
    Profile(ProfileArgs),
    /// Print image size, megapixels and the number of 128x128 subsamples
    Info(InfoArgs),
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// JSON run file
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for initialization and both samplers
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory for the log and checkpoint
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScaleModeArg {
    Native,
    Rescale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Ab,
    Ba,
}

#[derive(Args, Debug, Default)]
pub struct TranslateArgs {
    /// Model directory written by `train` (its `checkpoint/` folder)
    #[arg(value_name = "CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// Image to translate
    #[arg(value_name = "INPUT")]
    pub input: Option<PathBuf>,
    /// JSON run file
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output PNG
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Tile size
    #[arg(long, num_args = 2, value_names = ["W", "H"])]
    pub tile: Option<Vec<usize>>,
    /// Tile stride
    #[arg(long, num_args = 2, value_names = ["SX", "SY"])]
    pub stride: Option<Vec<usize>>,
    /// Run tiles at their own size or resized to the batch resolution
    #[arg(long, value_enum)]
    pub scale_mode: Option<ScaleModeArg>,
    /// Worker threads
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
    /// Translation direction
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
}

#[derive(Args, Debug, Default)]
pub struct ProfileArgs {
    /// Model directory; a randomly initialized model is used without one
    #[arg(value_name = "CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// JSON run file
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for the random model and the synthetic images
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Report file
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Square sizes for whole-image passes, comma separated
    #[arg(long, value_delimiter = ',', value_name = "N,N,..")]
    pub sizes: Option<Vec<usize>>,
    /// Square sizes for tiled passes, comma separated
    #[arg(long, value_delimiter = ',', value_name = "N,N,..")]
    pub tiled_sizes: Option<Vec<usize>>,
    /// Tile size for tiled passes
    #[arg(long, num_args = 2, value_names = ["W", "H"])]
    pub tile: Option<Vec<usize>>,
    /// Tile stride for tiled passes
    #[arg(long, num_args = 2, value_names = ["SX", "SY"])]
    pub stride: Option<Vec<usize>>,
    /// Worker threads for tiled passes
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InfoArgs {
    /// Image file
    #[arg(value_name = "IMAGE")]
    pub image: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Translate(a) => commands::translate(a),
        Command::Profile(a) => commands::profile(a),
        Command::Info(a) => commands::info(a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK),
        Err(f) => {
            eprintln!("error: {}", exit::describe(f.error()));
            ExitCode::from(f.code())
        }
    }
}
