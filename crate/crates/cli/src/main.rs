mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Scribble-supervised vessel segmentation.
#[derive(Debug, Parser)]
#[command(name = "octave", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        count: usize,
        /// Image size as HxW.
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Derive scribbles from dense masks for a seeded subset of samples.
    ScribbleGen {
        /// A dataset directory (with manifest.jsonl) or a directory of mask PNGs.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        availability: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a segmentor / discriminator pair.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from last.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint (or a directory of fold runs) on its test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn training logs and eval reports into plot-ready tables.
    Report {
        /// Run directories.
        #[arg(long = "in", required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        plots: PathBuf,
    },
    /// Train and evaluate once per scribble availability.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.75,0.5,0.1")]
        availability: Vec<f64>,
    },
}

/// Flags shared by `train` and `sweep`. Each overrides the config file,
/// which in turn overrides the built-in default.
#[derive(Debug, Args)]
struct RunArgs {
    /// TOML file with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Root seed. Falls back to the config, then OCTAVE_SEED, then 50.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    fold: Option<usize>,
    /// Scribble availability for `train`; `sweep` takes a list instead.
    #[arg(long)]
    scribbles: Option<f64>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("octave: error: {}: {}", e.category(), e);
            ExitCode::from(e.exit_code())
        }
    }
}
