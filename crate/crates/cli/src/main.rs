use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Optic disc and cup segmentation: synthetic data, polar preprocessing,
/// adapter fine-tuning, evaluation and ablation.
#[derive(Parser, Debug)]
#[command(name = "discseg", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run configuration; keys not set fall back to the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Named preset used when no config file is given (desk, paper, quick, tiny).
    #[arg(long, global = true, default_value = "desk")]
    pub preset: String,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (file, for visualize).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (images/, masks/, manifest.json).
    Synth {
        #[arg(long)]
        count: Option<usize>,
        /// low or high
        #[arg(long)]
        contrast: Option<String>,
    },
    /// Crop, polar-warp and resize a dataset; writes model-domain PNGs.
    Preprocess {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train on the train split and write checkpoint.ckpt plus loss.tsv.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint; its embedded config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split (or every sample with --all).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        all: bool,
        /// Also write a panel image per sample.
        #[arg(long)]
        overlays: bool,
    },
    /// Train and evaluate the five component combinations with one seed.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print parameter census, trainable fraction and model hash.
    Inspect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Four-panel figure for one sample.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        sample: String,
    },
}

const WORKERS_ENV: &str = "DISCSEG_WORKERS";

fn init_workers() -> Result<(), String> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{WORKERS_ENV} must be a positive integer, got '{v}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = init_workers() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let g = &cli.global;
    let result = match cli.command {
        Command::Synth { count, contrast } => commands::synth(g, count, contrast.as_deref()),
        Command::Preprocess { data } => commands::preprocess_cmd(g, data),
        Command::Train { data, resume, epochs } => commands::train(g, data, resume, epochs),
        Command::Eval {
            checkpoint,
            data,
            all,
            overlays,
        } => commands::eval(g, &checkpoint, data, all, overlays),
        Command::Ablate { data } => commands::ablate(g, data),
        Command::Inspect { checkpoint } => commands::inspect(g, checkpoint),
        Command::Visualize {
            checkpoint,
            data,
            sample,
        } => commands::visualize(g, &checkpoint, data, &sample),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
