use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hids_cli::config::PipelineConfig;
use hids_cli::error::CliError;
use hids_cli::stages::{self, Paths};

/// Host intrusion detection over system-call traces: generate corpora,
/// train the feature extractor, quantize it, fit the novelty detector,
/// calibrate the threshold, detect, evaluate, and benchmark.
#[derive(Parser)]
#[command(name = "hids", version, about)]
struct Cli {
    /// Pipeline config file (TOML-style key = value with per-stage sections);
    /// defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Use the quantized model for detect, calibrate, fit-forest, and eval.
    #[arg(long, global = true)]
    quantized: bool,

    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic trace corpus and its manifest.
    Synth,
    /// Parse traces, build the vocabulary, window, and split.
    Ingest,
    /// Train the feature extractor on the train split.
    Train,
    /// Post-training int8 quantization of the trained extractor.
    Quantize,
    /// Fit the isolation forest on train-split features.
    FitForest,
    /// Calibrate the mean + k·std threshold on validation scores.
    Calibrate,
    /// Classify the test split through the deployment pipeline.
    Detect,
    /// Compute metrics from detections and write the reports.
    Eval,
    /// Per-sample latency benchmark plus payload sizes.
    Bench,
    /// All stages in order: synth, ingest, train, quantize, fit-forest,
    /// calibrate, detect, eval (plus the quantized chain when enabled).
    Run,
    /// Print the fully resolved configuration.
    EchoConfig,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.pipeline.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let paths = Paths::new(&cli.out);
    paths.ensure_out()?;
    match cli.command {
        Command::Synth => stages::cmd_synth(&config, &paths),
        Command::Ingest => stages::cmd_ingest(&config, &paths),
        Command::Train => stages::cmd_train(&config, &paths),
        Command::Quantize => stages::cmd_quantize(&config, &paths),
        Command::FitForest => stages::cmd_fit_forest(&config, &paths, cli.quantized),
        Command::Calibrate => stages::cmd_calibrate(&config, &paths, cli.quantized),
        Command::Detect => stages::cmd_detect(&config, &paths, cli.quantized),
        Command::Eval => stages::cmd_eval(&config, &paths, cli.quantized),
        Command::Bench => hids_cli::bench::cmd_bench(&config, &paths).map(|_| ()),
        Command::Run => stages::cmd_run(&config, &paths),
        Command::EchoConfig => {
            print!("{}", config.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
