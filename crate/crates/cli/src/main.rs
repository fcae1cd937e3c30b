use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::debug;
use regime_hmm::commands::{self, BUNDLE_FILE};
use regime_hmm::pipeline::PipelineConfig;
use regime_hmm::{Error, Result};

/// Regime detection with HMMs over factor groups and an LSTM head.
///
/// Log verbosity is read from REGIME_HMM_LOG (error, warn, info, debug,
/// trace). On failure a JSON error record is written to stderr and the exit
/// code is 1.
#[derive(Debug, Parser)]
#[command(name = "regime-hmm", version)]
struct Cli {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config's `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Input CSV; overrides the file the command would take from the config.
    #[arg(long, global = true)]
    input: Option<PathBuf>,

    /// Model bundle; defaults to `<out>/bundle.json`.
    #[arg(long, global = true)]
    model: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Emission {
    Gmm,
    Boosted,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Triple-barrier labels for the training file (or --input).
    Label,
    /// Rank every factor column by the count-matrix score.
    ScoreFeatures,
    /// Fit one regime model per factor group and write the bundle.
    Train {
        #[arg(long, value_enum)]
        emission: Option<Emission>,
    },
    /// Viterbi paths and log-likelihoods of every group model.
    Decode,
    /// Fit the LSTM head on stacked training posteriors.
    TrainLstm,
    /// Class probabilities of the LSTM head.
    Predict,
    /// Accuracy and confusion matrix on the test file.
    Eval,
    /// Per-bar close, state, posteriors and label for charting.
    ExportPlot,
    /// Write a synthetic series from the config's `[synth]` table.
    Synth {
        /// Split in time into train.csv and test.csv at this fraction.
        #[arg(long)]
        split: Option<f64>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn input_or<'a>(cli: &'a Cli, fallback: Result<&'a Path>) -> Result<&'a Path> {
    match &cli.input {
        Some(p) => Ok(p),
        None => fallback,
    }
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let mut cfg = load_config(cli)?;
    let out = cfg.out_dir.clone();
    let model = cli.model.clone().unwrap_or_else(|| out.join(BUNDLE_FILE));
    debug!("output directory {}", out.display());

    match &cli.command {
        Command::Label => commands::label(&cfg, input_or(cli, cfg.train_path())?, &out),
        Command::ScoreFeatures => commands::score_features(&cfg, input_or(cli, cfg.train_path())?, &out),
        Command::Train { emission } => {
            if let Some(e) = emission {
                cfg.set_emission(matches!(e, Emission::Boosted));
            }
            if let Some(p) = &cli.input {
                cfg.train = Some(p.clone());
            }
            commands::train(&cfg, &out)
        }
        Command::Decode => commands::decode(&model, input_or(cli, cfg.train_path())?, &out),
        Command::TrainLstm => {
            if let Some(p) = &cli.input {
                cfg.train = Some(p.clone());
            }
            commands::train_lstm(&cfg, &model, &out)
        }
        Command::Predict => commands::predict(&model, input_or(cli, cfg.test_path())?, &out),
        Command::Eval => {
            if let Some(p) = &cli.input {
                cfg.test = Some(p.clone());
            }
            commands::eval(&cfg, &model, &out)
        }
        Command::ExportPlot => commands::export_plot(&model, input_or(cli, cfg.test_path())?, &out),
        Command::Synth { split } => {
            let mut synth = cfg.synth.clone().unwrap_or_default();
            if let Some(seed) = cli.seed {
                synth.seed = seed;
            }
            commands::write_synth(&synth, *split, &out)
        }
    }
}

fn error_record(err: &Error) -> serde_json::Value {
    serde_json::json!({
        "error": {
            "kind": err.kind(),
            "message": err.to_string(),
            "row": err.row(),
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REGIME_HMM_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_record(&err));
            ExitCode::FAILURE
        }
    }
}
