use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ier_core::audio::{load_wav, log_mel, MelConfig};
use ier_core::checkpoint::Stage;
use ier_core::pipeline::{self, AblationToggles};
use ier_core::tensor_io::{write_tensor, Tensor};
use ier_core::{ExperimentConfig, IerError, Result};

#[derive(Parser)]
#[command(name = "ier", version, about = "Train and evaluate interference-erasing sound localization on synthetic scenes")]
struct Cli {
    /// Experiment configuration (flat JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    Identifier,
    #[value(name = "2")]
    Two,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::One => Stage::Stage1,
            StageArg::Identifier => Stage::Identifier,
            StageArg::Two => Stage::Stage2,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Toggle {
    Filters,
    Identifier,
    Threshold,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: manifest plus tensor files.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage and write its checkpoint and CSV loss log.
    Train {
        #[arg(long)]
        stage: StageArg,
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint of the previous stage.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: report.json and per_sample.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare filter, identifier and threshold variants; writes a CSV table.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation dataset.
        #[arg(long)]
        data: PathBuf,
        /// Stage-2 training scenes when the checkpoint predates stage 2.
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// Groups to run; all when omitted.
        #[arg(long, value_delimiter = ',')]
        toggles: Vec<Toggle>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write every AVMap as a raw tensor and a PGM preview.
    ExportMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only the first N unconstrained scenes.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Log-mel spectrogram of a WAV file as a frames × bins tensor.
    LogMel {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        bins: usize,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("IER_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| IerError::usage(format!("IER_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| IerError::usage(format!("cannot size the thread pool: {e}")))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let config = load_config(&cli)?;
    match cli.command {
        Command::Synth { out } => {
            let manifest = pipeline::cmd_synth(&config, &out)?;
            println!("{} scenes written to {}", manifest.items.len(), out.display());
        }
        Command::Train { stage, data, from, out } => {
            let log = pipeline::cmd_train(&config, &data, stage.into(), from.as_deref(), &out)?;
            if let Some(last) = log.last() {
                println!("final loss {:.6} after {} epochs", last.loss, log.len());
            }
            println!("checkpoint {}", out.display());
        }
        Command::Eval { checkpoint, data, out } => {
            let report = pipeline::cmd_eval(&config, &checkpoint, &data, &out)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| IerError::Format(e.to_string()))?);
        }
        Command::Ablate {
            checkpoint,
            data,
            train_data,
            toggles,
            out,
        } => {
            let toggles = if toggles.is_empty() {
                AblationToggles::default()
            } else {
                AblationToggles {
                    filters: toggles.contains(&Toggle::Filters),
                    identifier: toggles.contains(&Toggle::Identifier),
                    threshold: toggles.contains(&Toggle::Threshold),
                }
            };
            let rows = pipeline::cmd_ablate(&config, &checkpoint, &data, train_data.as_deref(), &toggles, &out)?;
            for r in rows {
                println!(
                    "{:<10} silent={:<5} offscreen={:<5} identifier={:<5} mode={} ciou_03={:.3} auc={:.3} recall={:.3}",
                    r.group, r.silent_filter, r.offscreen_filter, r.identifier, r.threshold_mode, r.ciou_03, r.auc, r.recall
                );
            }
        }
        Command::ExportMaps {
            checkpoint,
            data,
            out,
            limit,
        } => {
            let n = pipeline::cmd_export_maps(&config, &checkpoint, &data, &out, limit)?;
            println!("{n} files written to {}", out.display());
        }
        Command::LogMel { wav, out, bins } => {
            let wave = load_wav(&wav)?;
            let mel = log_mel(&wave, &MelConfig { bins, ..MelConfig::default() })?;
            write_tensor(&out, &Tensor::from_f64(vec![mel.frames, mel.bins], &mel.data)?)?;
            println!("{} x {} log-mel frames written to {}", mel.frames, mel.bins, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
