use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod manifest;

/// Instance segmentation by object layering.
#[derive(Debug, Parser)]
#[command(name = "layerseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenData {
        /// Scene spec JSON; its seed field is ignored in favour of --seed.
        #[arg(long)]
        spec: PathBuf,
        /// Number of scenes.
        #[arg(long)]
        count: usize,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Base seed; scene i uses seed + i.
        #[arg(long)]
        seed: u64,
    },
    /// Train both phases and write the best checkpoint of each.
    Train {
        /// Dataset directory containing dataset.json.
        #[arg(long)]
        data: PathBuf,
        /// Training config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Run directory for checkpoints, logs and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Seed for initialisation, splitting, shuffling and augmentation.
        #[arg(long)]
        seed: u64,
        /// Worker thread cap.
        #[arg(long)]
        threads: Option<usize>,
        /// Skip phase 1 and continue from this phase-1 checkpoint.
        #[arg(long)]
        resume_phase1: Option<PathBuf>,
    },
    /// Segment an image, a scene directory or a whole dataset.
    Infer {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// PNG image, scene directory, or dataset directory.
        #[arg(long)]
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Activation threshold.
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        /// Minimal object size in pixels.
        #[arg(long, default_value_t = 30)]
        smin: usize,
        /// Keep only the arg-max layer per pixel.
        #[arg(long)]
        no_overlap_mode: bool,
    },
    /// Score predictions against a ground-truth dataset.
    Eval {
        /// Prediction directory with one subdirectory per scene.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth dataset directory.
        #[arg(long)]
        gt: PathBuf,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-layer activation maps as grayscale PNGs.
    Viz {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene directory or PNG image.
        #[arg(long)]
        scene: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { spec, count, out, seed } => commands::gen_data(&spec, count, &out, seed),
        Command::Train {
            data,
            config,
            out,
            seed,
            threads,
            resume_phase1,
        } => {
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
            }
            commands::train(&data, &config, &out, seed, resume_phase1.as_deref())
        }
        Command::Infer {
            ckpt,
            input,
            out,
            tau,
            smin,
            no_overlap_mode,
        } => {
            let post = layerseg::PostprocessParams {
                tau,
                s_min: smin,
                overlap_mode: !no_overlap_mode,
                ..Default::default()
            };
            commands::infer(&ckpt, &input, &out, &post)
        }
        Command::Eval { pred, gt, out } => commands::eval(&pred, &gt, &out),
        Command::Viz { ckpt, scene, out } => commands::viz(&ckpt, &scene, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
