//! gsaf: feedforward Gaussian-splat head avatars at desk scale.
//!
//! Subcommands: gen-data, train, reconstruct, fuse, render, eval, export.
//! Exit codes: 0 success, 2 bad input, 3 numerical divergence, 4 IO failure.

mod avatar_file;
mod commands;
mod config;
mod dataset;
mod meta;

use clap::{Parser, Subcommand};
use gsaf_core::Error;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "gsaf", version, about = "Feedforward Gaussian-splat head avatars")]
struct Cli {
    /// Thread pool size (env GSAF_THREADS also caps it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with exact ground truth.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Training identities.
        #[arg(long, default_value_t = 32)]
        identities: usize,
        /// Held-out identities.
        #[arg(long, default_value_t = 8)]
        holdout: usize,
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Icosphere subdivision of the head proxy (2 → 162 vertices).
        #[arg(long, default_value_t = 2)]
        subdiv: usize,
    },
    /// Train the reconstruction transformer on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: config::TrainOverrides,
    },
    /// Feedforward reconstruction: frames → fused canonical avatar PLY.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of NNN.png + NNN.json frame pairs.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, name = "max-frames", default_value_t = 16)]
        max_frames: usize,
        /// Frame filename prefix filter (e.g. eval_in_).
        #[arg(long, default_value = "")]
        prefix: String,
        /// Proxy archive reference recorded in the avatar sidecar.
        #[arg(long)]
        proxy: Option<PathBuf>,
    },
    /// Incremental reconstruction: append new frame groups to an avatar.
    Fuse {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, name = "max-frames", default_value_t = 16)]
        max_frames: usize,
        #[arg(long, default_value = "")]
        prefix: String,
    },
    /// Render an avatar along a JSON-lines expression/camera track.
    Render {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long)]
        track: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        proxy: Option<PathBuf>,
    },
    /// PSNR/SSIM of an avatar against target frames.
    Eval {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long, default_value = "eval_tgt_")]
        prefix: String,
        #[arg(long)]
        proxy: Option<PathBuf>,
        /// Metrics JSON output path (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert an avatar: normalized PLY, or a canonical-view PFM/PNG.
    Export {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long, value_parser = ["ply", "pfm", "png"])]
        what: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        proxy: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("GSAF_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0);
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }
    match run(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => 3,
        Error::Io(_) => 4,
        Error::Dim { .. } | Error::Contract { .. } | Error::Format { .. } => 2,
    }
}

fn run(cmd: Command) -> gsaf_core::Result<()> {
    match cmd {
        Command::GenData {
            out,
            identities,
            holdout,
            res,
            seed,
            subdiv,
        } => commands::gen_data(&out, identities, holdout, res, seed, subdiv),
        Command::Train {
            data,
            out,
            resume,
            overrides,
        } => commands::train(&data, &out, resume.as_deref(), &overrides),
        Command::Reconstruct {
            checkpoint,
            frames,
            out,
            max_frames,
            prefix,
            proxy,
        } => commands::reconstruct(
            &checkpoint,
            &frames,
            &out,
            max_frames,
            &prefix,
            proxy.as_deref(),
        ),
        Command::Fuse {
            avatar,
            frames,
            checkpoint,
            out,
            max_frames,
            prefix,
        } => commands::fuse(&avatar, &frames, &checkpoint, &out, max_frames, &prefix),
        Command::Render {
            avatar,
            track,
            out,
            proxy,
        } => commands::render(&avatar, &track, &out, proxy.as_deref()),
        Command::Eval {
            avatar,
            targets,
            prefix,
            proxy,
            out,
        } => commands::eval(&avatar, &targets, &prefix, proxy.as_deref(), out.as_deref()),
        Command::Export {
            avatar,
            what,
            out,
            proxy,
        } => commands::export(&avatar, &what, &out, proxy.as_deref()),
    }
}
