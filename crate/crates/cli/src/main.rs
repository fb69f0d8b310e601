use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gcpa_cli::ablate::cmd_ablate;
use gcpa_cli::config::{RunConfig, DATA_ROOT_ENV};
use gcpa_cli::eval::cmd_eval;
use gcpa_cli::infer::cmd_infer;
use gcpa_cli::plot::cmd_plot;
use gcpa_cli::train::{cmd_train, Resume};
use gcpa_cli::{CliResult, Status};

#[derive(Parser)]
#[command(name = "gcpa", version, about = "Salient object detection: train, infer, evaluate, plot, ablate")]
#[command(after_help = format!("Environment:\n  {DATA_ROOT_ENV}  overrides data.root from the config\n  RUST_LOG        log filter (default: info)\n\nExit codes: 0 success, 1 partial failure, 2 usage or configuration error"))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, loss.csv and a config snapshot.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides output_dir.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint; without a value, the latest one in the output directory.
        #[arg(long, value_name = "CHECKPOINT", num_args = 0..=1)]
        resume: Option<Option<PathBuf>>,
    },
    /// Write one saliency PNG per input image, at the image's own size.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of jpg/png images.
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Square inference side; defaults to eval.input_size from --config, else the training crop.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score predictions against ground-truth masks.
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// Report path (JSON, with a per-image CSV alongside).
        #[arg(long)]
        output: PathBuf,
        /// Name shown in the table; defaults to the dataset directory name.
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Draw PR and F-measure curves from one or more reports.
    Plot {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train and score each component combination.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// ResNet-50 encoder and the reference schedule.
        #[arg(long)]
        full_scale: bool,
    },
}

fn load_config(path: &PathBuf, output: Option<PathBuf>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(o) = output {
        cfg.output_dir = o;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<Status> {
    match cli.command {
        Command::Train {
            config,
            output,
            seed,
            resume,
        } => {
            let cfg = load_config(&config, output, seed)?;
            let resume = match resume {
                None => Resume::Fresh,
                Some(None) => Resume::Latest,
                Some(Some(p)) => Resume::From(p),
            };
            cmd_train(&cfg, &resume)
        }
        Command::Infer {
            checkpoint,
            input,
            output,
            size,
            config,
        } => {
            let size = match (size, config) {
                (Some(s), _) => Some(s),
                (None, Some(c)) => RunConfig::load(&c)?.eval.input_size,
                (None, None) => None,
            };
            cmd_infer(&checkpoint, &input, &output, size)
        }
        Command::Eval {
            pred_dir,
            gt_dir,
            output,
            dataset,
        } => cmd_eval(&pred_dir, &gt_dir, &output, dataset.as_deref()),
        Command::Plot { reports, output } => cmd_plot(&reports, &output),
        Command::Ablate {
            config,
            output,
            seed,
            full_scale,
        } => {
            let cfg = load_config(&config, output, seed)?;
            cmd_ablate(&cfg, full_scale)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let status = match run(cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            e.status
        }
    };
    ExitCode::from(status.code())
}
