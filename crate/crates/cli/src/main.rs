mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpgan::config::Variant;
use dpgan::Error;

#[derive(Parser, Debug)]
#[command(name = "dpgan", version, about = "Dual-pyramid semantic image synthesis on toy scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `--set key=value` overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural scene dataset to PNG files.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Index of the first scene.
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
    /// Train a model; writes the resolved config, checkpoints, loss log and metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate an image for one label PNG.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        label: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the live generator instead of the EMA copy.
        #[arg(long)]
        live: bool,
    },
    /// Score a checkpoint on a held-out dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        segmenter: PathBuf,
        /// Directory for metrics.txt, metrics.csv and the resolved settings.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Noise draws for the multi-modal statistics.
        #[arg(long, default_value_t = 5)]
        modes: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
        scales: Vec<f64>,
        /// Use only the first N scenes; 0 uses all.
        #[arg(long, default_value_t = 0)]
        samples: usize,
        #[arg(long)]
        live: bool,
    },
    /// Train and evaluate ablation variants with a matched budget.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Variant to run; repeatable.
        #[arg(long, required = true)]
        variant: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        segmenter: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Print trainable parameter counts for a config.
    ReportParams {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit the frozen evaluation segmenter.
    TrainSegmenter {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out dataset for the final mIoU.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long, default_value_t = 1500)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Exit status for a failed command: 1 for problems with the user's input,
/// 2 for failures during the run.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidMeta(_)
        | Error::InvalidSpec(_)
        | Error::LabelOutOfRange { .. }
        | Error::Dataset { .. }
        | Error::Checkpoint(_)
        | Error::CheckpointShape { .. } => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> dpgan::Result<()> {
    use commands::*;
    match cli.command {
        Command::GenerateData { out, count, resolution, classes, seed, start } => {
            generate_data(&out, count, resolution, classes, seed, start)
        }
        Command::Train { cfg, data, out, steps, resume } => {
            let mut overrides = cfg.set.clone();
            push_opt(&mut overrides, "data", data.map(|p| p.display().to_string()));
            push_opt(&mut overrides, "out", out.map(|p| p.display().to_string()));
            push_opt(&mut overrides, "steps", steps.map(|s| s.to_string()));
            train(cfg.config.as_deref(), &overrides, resume.as_deref())
        }
        Command::Synthesize { checkpoint, label, out, seed, live } => synthesize(&checkpoint, &label, &out, seed, live),
        Command::Eval { checkpoint, data, segmenter, out, seed, modes, scales, samples, live } => {
            let opts = dpgan::evaluation::EvalOptions { noise_seed: seed, modes, scales, ..Default::default() };
            eval(&checkpoint, &data, &segmenter, out.as_deref(), &opts, samples, live)
        }
        Command::Ablate { cfg, variant, seeds, data, eval_data, segmenter, out, steps } => {
            let variants =
                variant.iter().map(|v| v.parse::<Variant>()).collect::<dpgan::Result<Vec<_>>>()?;
            let mut overrides = cfg.set.clone();
            push_opt(&mut overrides, "data", data.map(|p| p.display().to_string()));
            push_opt(&mut overrides, "eval_data", eval_data.map(|p| p.display().to_string()));
            push_opt(&mut overrides, "segmenter", segmenter.map(|p| p.display().to_string()));
            push_opt(&mut overrides, "out", out.map(|p| p.display().to_string()));
            push_opt(&mut overrides, "steps", steps.map(|s| s.to_string()));
            ablate(cfg.config.as_deref(), &overrides, &variants, &seeds)
        }
        Command::ReportParams { cfg } => report_params(cfg.config.as_deref(), &cfg.set),
        Command::TrainSegmenter { data, out, heldout, steps, batch_size, lr, seed } => {
            let opts = dpgan::evaluation::SegmenterTraining { steps, batch_size, lr, seed };
            train_segmenter(&data, &out, heldout.as_deref(), &opts)
        }
    }
}

fn push_opt(overrides: &mut Vec<String>, key: &str, value: Option<String>) {
    if let Some(v) = value {
        overrides.push(format!("{key}={v}"));
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
