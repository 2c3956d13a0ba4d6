//! `xcam`: train small CNNs on synthetic shapes, explain their decisions
//! and score the explanations.

mod commands;
mod render;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::LevelFilter;

use crate::report::exit_code;

#[derive(Debug, Parser)]
#[command(
    name = "xcam",
    version,
    about = "Grad-CAM++ and baseline CNN explanations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Record elapsed wall time in the run report. Off by default so that
    /// reruns produce byte-identical reports.
    #[arg(long)]
    pub wall_time: bool,
}

#[derive(Debug, Args, Clone)]
pub struct Training {
    #[arg(long, default_value_t = 12)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 600)]
        num_samples: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.5)]
        multi_instance_prob: f64,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
    },
    /// Train a model on the training split of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Architecture: teacher, student or gap_cam.
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        training: Training,
    },
    /// Explain one image with one method.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Input image (binary PPM).
        #[arg(long)]
        image: PathBuf,
        /// cam, grad-cam, grad-cam++, grad-cam++perp or guided-grad-cam++.
        #[arg(long, default_value = "grad-cam++")]
        method: String,
        /// Class to explain; defaults to the predicted class.
        #[arg(long)]
        class: Option<usize>,
        /// Also write the saliency map thresholded at this level.
        #[arg(long)]
        delta: Option<f64>,
        /// Smooth class score behind the Grad-CAM++ weights: exp or softmax.
        #[arg(long, default_value = "exp")]
        score: String,
        /// Debugging aid: replace the Grad-CAM++ pixel weights by 1/Z.
        #[arg(long)]
        force_uniform_alpha: bool,
    },
    /// Faithfulness and localization metrics over a dataset split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated methods.
        #[arg(
            long = "method",
            value_delimiter = ',',
            default_value = "grad-cam,grad-cam++"
        )]
        methods: Vec<String>,
        /// Comma-separated localization thresholds.
        #[arg(long = "delta", value_delimiter = ',', default_value = "0,0.25,0.5")]
        deltas: Vec<f64>,
        /// train, val or all.
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Distil a student from a teacher checkpoint, comparing loss functions.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        lambda_interpret: f64,
        /// Add rows that include the temperature-softened logit loss.
        #[arg(long)]
        kd: bool,
        #[arg(long, default_value_t = 4.0)]
        temperature: f64,
        #[arg(long, default_value = "grad-cam++")]
        method: String,
        /// Map normalisation before comparison: min-max or none.
        #[arg(long, default_value = "min-max")]
        normalization: String,
        #[command(flatten)]
        training: Training,
    },
    /// Occlusion curve: relative confidence as low-saliency pixels are removed.
    Roc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "grad-cam++")]
        method: String,
        /// Comma-separated, sorted quantile levels in [0, 1].
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"
        )]
        theta_grid: Vec<f64>,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare Grad-CAM++ with its variant that keeps negative gradients.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn init_logging() {
    let level = match std::env::var("XCAM_LOG").as_deref() {
        Ok("quiet") => LevelFilter::Error,
        Ok("debug") => LevelFilter::Debug,
        Ok("info") | Err(_) => LevelFilter::Info,
        Ok(other) => {
            eprintln!("warning: unknown XCAM_LOG value `{other}`, using info");
            LevelFilter::Info
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use commands as c;
    match cli.command {
        Command::Generate {
            common,
            num_samples,
            size,
            multi_instance_prob,
            train_fraction,
        } => c::generate(
            &common,
            num_samples,
            size,
            multi_instance_prob,
            train_fraction,
        ),
        Command::Train {
            common,
            model,
            data,
            training,
        } => c::train(&common, &model, &data, &training),
        Command::Explain {
            common,
            model,
            image,
            method,
            class,
            delta,
            score,
            force_uniform_alpha,
        } => c::explain(&c::ExplainArgs {
            common,
            model,
            image,
            method,
            class,
            delta,
            score,
            force_uniform_alpha,
        }),
        Command::Evaluate {
            common,
            model,
            data,
            methods,
            deltas,
            split,
            jobs,
        } => c::evaluate(&common, &model, &data, &methods, &deltas, &split, jobs),
        Command::Distill {
            common,
            model,
            data,
            lambda_interpret,
            kd,
            temperature,
            method,
            normalization,
            training,
        } => c::distill(&c::DistillArgs {
            common,
            model,
            data,
            lambda_interpret,
            kd,
            temperature,
            method,
            normalization,
            training,
        }),
        Command::Roc {
            common,
            model,
            data,
            method,
            theta_grid,
            split,
            jobs,
        } => c::roc(&common, &model, &data, &method, &theta_grid, &split, jobs),
        Command::Ablate {
            common,
            model,
            data,
            split,
            jobs,
        } => c::ablate(&common, &model, &data, &split, jobs),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(report::EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
