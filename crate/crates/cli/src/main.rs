use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Output root override; takes precedence over `output_dir` in the config
/// file but not over `--out`.
pub const OUTPUT_ENV: &str = "AUTOPROSAM_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "autoprosam", version, about = "Prompt-free 3D organ segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Run configuration (TOML). Without one the desk preset is used.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable the automatic prompt generator.
    #[arg(long)]
    pub no_apg: bool,
    /// Disable multi-layer aggregation in the decoder.
    #[arg(long)]
    pub no_mlam: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset and its manifest.
    Synth {
        /// Dataset spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample and normalize every manifest case into the output directory.
    Preprocess(Common),
    /// Train and write checkpoints plus the training log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment one volume with a checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Label volume to write (`.nii`, `.nii.gz` or `.vol`).
        #[arg(long)]
        output: PathBuf,
    },
    /// Dice and NSD of a checkpoint on one manifest split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate all four prompt-generator / aggregation combinations.
    Ablate(Common),
    /// Tunable and frozen parameter counts.
    Params(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { spec, out } => commands::synth(&spec, &out),
        Command::Preprocess(c) => commands::preprocess(&c),
        Command::Train { common, resume } => commands::train(&common, resume.as_deref()),
        Command::Infer {
            common,
            checkpoint,
            input,
            output,
        } => commands::infer(&common, &checkpoint, &input, &output),
        Command::Eval { common, checkpoint, split } => commands::eval(&common, &checkpoint, &split),
        Command::Ablate(c) => commands::ablate(&c),
        Command::Params(c) => commands::params(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
