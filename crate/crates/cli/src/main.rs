//! trajflow command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trajflow::data::Split;
use trajflow::error::Error;
use trajflow_cli::commands;
use trajflow_cli::run_config::RunConfig;

#[derive(Parser)]
#[command(
    name = "trajflow",
    about = "Conditional-flow trajectory forecasting: simulate, train, evaluate, predict, plot, verify",
    version
)]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Numeric precision (overrides the config file).
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (from `simulate`) or a raw series CSV.
    #[arg(long)]
    data: PathBuf,
    /// Which split to read the sample from.
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    /// Sample index within the split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Latent selection: mean | sample | average.
    #[arg(long, default_value = "mean", value_parser = ["mean", "sample", "average"])]
    mode: String,
    /// Prior temperature for sample/average modes.
    #[arg(long, default_value_t = 0.7)]
    temperature: f64,
    /// Sample count for average mode.
    #[arg(long, default_value_t = 10)]
    samples: usize,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic particle dataset.
    Simulate {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset; writes model.ckpt and metrics.jsonl.
    Train {
        /// Dataset directory (from `simulate`) or a raw series CSV.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Report test MSE at prediction horizons.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated 1-based horizons.
        #[arg(long, default_value = "1,15,25", value_delimiter = ',')]
        horizons: Vec<usize>,
        #[arg(long, default_value = "mean", value_parser = ["mean", "sample", "average"])]
        mode: String,
        #[arg(long, default_value_t = 0.7)]
        temperature: f64,
        #[arg(long, default_value_t = 10)]
        samples: usize,
    },
    /// Predict one sample's future frames to CSV.
    Predict(PredictArgs),
    /// Render predicted vs ground-truth trajectories to SVG.
    Plot(PredictArgs),
    /// Train the ablation grid (masking / prior / residual flags).
    Ablate {
        /// Epochs per grid row.
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        /// Output directory for the per-row checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the numeric verification suites.
    Verify,
}

fn parse_split(s: &str) -> Split {
    match s {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    }
}

fn run(cli: Cli) -> trajflow::Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.model.seed = seed;
    }
    if let Some(p) = &cli.precision {
        config.model.precision = p.parse()?;
    }
    let seed = config.model.seed;
    let precision = config.model.precision;

    match &cli.command {
        Command::Simulate { out } => commands::simulate(&config, seed, out),
        Command::Train { data, out } => commands::train_cmd(&config, data, out, seed, precision),
        Command::Eval {
            checkpoint,
            data,
            horizons,
            mode,
            temperature,
            samples,
        } => commands::eval_cmd(
            checkpoint,
            data,
            &config,
            horizons,
            mode,
            *temperature,
            *samples,
            seed,
        ),
        Command::Predict(a) => commands::predict_cmd(
            &a.checkpoint,
            &a.data,
            &config,
            parse_split(&a.split),
            a.index,
            &a.mode,
            a.temperature,
            a.samples,
            seed,
            &a.out,
        ),
        Command::Plot(a) => commands::plot_cmd(
            &a.checkpoint,
            &a.data,
            &config,
            parse_split(&a.split),
            a.index,
            &a.mode,
            a.temperature,
            a.samples,
            seed,
            &a.out,
        ),
        Command::Ablate { epochs, out } => commands::ablate_cmd(seed, *epochs, out),
        Command::Verify => commands::verify_cmd(seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, everything else is usage
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::InvalidArgument(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
