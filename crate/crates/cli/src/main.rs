//! `dinolens` command-line entry point.
//!
//! Every command resolves its parameters (defaults, `--config`, `--set`,
//! `--seed`), writes them to a fresh run directory and prints its path.

mod commands;
mod inputs;
mod render;
mod run;

use std::cell::RefCell;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::maps::{EquivarianceArgs, ModelArgs, SweepArgs};
use commands::models::DistillArgs;
use commands::seg::{BenchArgs, SegmentArgs};
use commands::Ctx;
use inputs::SourceArgs;
use run::Run;

#[derive(Parser, Debug)]
#[command(name = "dinolens", version, about = "Positional-bias probing and ALiBi distillation for toy vision transformers")]
struct Cli {
    /// JSON parameter file for the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parameter override `KEY.PATH=JSON`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Replaces every seed in the resolved parameters.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, global = true, env = "DINOLENS_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the synthetic positionally biased teacher.
    Teacher,
    /// Distill a teacher into an ALiBi (or NoPE) student.
    Distill(DistillArgs),
    /// Linear-probe features against a coordinate ramp.
    Probe(SourceArgs),
    /// Per-layer, per-channel probe matrix.
    Fingerprint(SourceArgs),
    /// PCA renderings of patch features.
    Pca(SourceArgs),
    /// K-means clustering of patch features.
    Kmeans(SourceArgs),
    /// Cosine similarity to a query token.
    Similarity(SourceArgs),
    /// Feature structure on uninformative inputs under ALiBi jitter.
    DiagZero(ModelArgs),
    /// Features of one image over input resolutions.
    Sweep(SweepArgs),
    /// Feature discrepancy under flips, rolls and rotations.
    Equivariance(EquivarianceArgs),
    /// Train a pixel classifier on scribbles and segment images.
    Segment(SegmentArgs),
    /// Scribble-round segmentation benchmark on synthetic images.
    BenchSeg(BenchArgs),
    /// ALiBi distance matrix of a token grid.
    ExportAlibi,
}

fn dispatch(ctx: &Ctx, command: &Command) -> Result<Run> {
    match command {
        Command::Teacher => commands::models::teacher(ctx),
        Command::Distill(a) => commands::models::distill(ctx, a),
        Command::Probe(a) => commands::probing::probe(ctx, a),
        Command::Fingerprint(a) => commands::probing::fingerprint(ctx, a),
        Command::Pca(a) => commands::maps::pca(ctx, a),
        Command::Kmeans(a) => commands::maps::kmeans(ctx, a),
        Command::Similarity(a) => commands::maps::similarity(ctx, a),
        Command::DiagZero(a) => commands::maps::diag_zero(ctx, a),
        Command::Sweep(a) => commands::maps::sweep(ctx, a),
        Command::Equivariance(a) => commands::maps::equivariance(ctx, a),
        Command::Segment(a) => commands::seg::segment(ctx, a),
        Command::BenchSeg(a) => commands::seg::bench_seg(ctx, a),
        Command::ExportAlibi => commands::models::export_alibi(ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let log = run::init_logging();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")
        {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    }
    let ctx = Ctx {
        config: cli.config,
        sets: cli.sets,
        seed: cli.seed,
        out: cli.out,
        log,
        created: RefCell::new(None),
    };
    match dispatch(&ctx, &cli.command) {
        Ok(run) => {
            println!("{}", run.dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e:#}");
            if let Some(dir) = ctx.created.borrow().as_ref() {
                let _ = std::fs::remove_dir_all(dir);
            }
            ExitCode::FAILURE
        }
    }
}
