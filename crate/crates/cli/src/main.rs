//! `noisyleaf` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use noisyleaf::Error;

#[derive(Parser, Debug)]
#[command(name = "noisyleaf", version, about = "Leaf-disease classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for reports, checkpoints and other artifacts.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Supervised training with per-epoch validation.
    Train(Common),
    /// Noisy Student teacher/student iterations.
    Selftrain(Common),
    /// Metrics of a checkpoint on the validation split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Writes a predictions CSV for the validation split or an id list.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// CSV with an `image_id` column; requires `--images`.
        #[arg(long, value_name = "PATH", requires = "images")]
        ids: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        images: Option<PathBuf>,
    },
    /// Probability-averaging ensemble of checkpoints.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", value_name = "PATH", required = true)]
        checkpoints: Vec<PathBuf>,
        /// One nonnegative weight per checkpoint, summing to 1.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
    },
    /// Writes train-pipeline samples of one image as PNGs.
    AugmentPreview {
        #[command(flatten)]
        common: Common,
        /// PNG or PPM input; a synthetic leaf when omitted.
        #[arg(long, value_name = "PATH")]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Grid search for compound-scaling coefficients.
    ScaleSearch {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Generates the synthetic four-class dataset on disk.
    MakeSynthetic(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidConfig(_)
        | Error::InvalidSpec(_)
        | Error::InvalidCoefficient(_)
        | Error::InvalidAugmentConfig(_)
        | Error::InvalidTarget(_)
        | Error::InvalidGrid(_)
        | Error::ZeroStd(_)
        | Error::InvalidProbability { .. } => 1,
        Error::NonFinite(_) | Error::EmptyResult | Error::InvalidBase(_) | Error::InvalidScale(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(c) => commands::train(&c),
        Command::Selftrain(c) => commands::selftrain(&c),
        Command::Evaluate { common, checkpoint } => commands::evaluate(&common, &checkpoint),
        Command::Predict {
            common,
            checkpoint,
            ids,
            images,
        } => commands::predict(&common, &checkpoint, ids.as_deref(), images.as_deref()),
        Command::Ensemble {
            common,
            checkpoints,
            weights,
        } => commands::ensemble(&common, &checkpoints, weights),
        Command::AugmentPreview { common, image, count } => commands::augment_preview(&common, image.as_deref(), count),
        Command::ScaleSearch { common, top } => commands::scale_search(&common, top),
        Command::MakeSynthetic(c) => commands::make_synthetic(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
