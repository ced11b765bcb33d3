use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scanfer_cli::commands;

#[derive(Parser)]
#[command(name = "scanfer", version, about = "Two-branch attention network for expression classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration file
    Train {
        /// Path to a `key = value` run configuration
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset manifest
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Report file (default: next to the checkpoint)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write Grad-CAM heatmaps (raw PGM and overlay PPM) for one image
    Gradcam {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Target class 0-6 (default: the predicted class)
        #[arg(long)]
        class: Option<usize>,
        /// Output directory (default: the image's directory)
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Generate the synthetic 7-class dataset
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Image side length in pixels
        #[arg(long, default_value_t = 40)]
        size: usize,
    },
    /// Audit model gradients against central finite differences
    CheckGrad {
        /// Run configuration providing the model shape (default: desk preset)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Negative control: offset analytic gradients so the audit must fail
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config } => commands::cmd_train(&config).map(|()| true),
        Command::Eval { ckpt, manifest, out } => {
            commands::cmd_eval(&ckpt, &manifest, out.as_deref()).map(|()| true)
        }
        Command::Gradcam {
            ckpt,
            image,
            class,
            out_dir,
        } => commands::cmd_gradcam(&ckpt, &image, class, out_dir.as_deref()).map(|()| true),
        Command::SynthData {
            out,
            per_class,
            seed,
            size,
        } => commands::cmd_synth_data(&out, per_class, seed, size).map(|()| true),
        Command::CheckGrad { config, corrupt } => commands::cmd_check_grad(config.as_deref(), corrupt),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
