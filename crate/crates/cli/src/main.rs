use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use pfoa_core::pipeline::{self, RunConfig};

/// Patellofemoral osteoarthritis detection pipeline.
///
/// Settings are resolved as: flags, then the --config file, then defaults.
#[derive(Debug, Parser)]
#[command(name = "pfoa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input manifest (default: <out>/manifest.csv).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Directory holding the manifest's radiographs (default: <out>/images).
    #[arg(long, global = true)]
    images: Option<PathBuf>,
    /// Run directory for every output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of cross-validation folds.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Minimum detector confidence for a usable ROI.
    #[arg(long, global = true)]
    roi_threshold: Option<f64>,
    /// Reference model to fit (1, 2 or 3); all three when omitted.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=3))]
    variant: Option<u8>,
    /// Random-search trials per GBM fit.
    #[arg(long, global = true)]
    budget: Option<usize>,
    /// CNN training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Any other setting, as key=value. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort with phantom radiographs.
    Synth,
    /// Normalise, resample and orient the radiographs.
    Preprocess,
    /// Train the window detector, gate ROIs and apply exclusions.
    Roi,
    /// Cross-fit the CNN and write out-of-fold probabilities.
    Train,
    /// Cross-fit the clinical reference models.
    Reference,
    /// Cross-fit the CNN-plus-clinical fusion model.
    Fuse,
    /// Metrics, curves, subgroup table, comparisons and SHAP ranking.
    Evaluate,
    /// Run every step from synth to evaluate.
    All,
    /// Print the resolved configuration.
    Config,
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)
            .with_context(|| format!("reading config {}", path.display()))?;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let flag_values = [
        ("manifest", path(&cli.manifest)),
        ("images", path(&cli.images)),
        ("out", path(&cli.out)),
        ("k", cli.k.map(|v| v.to_string())),
        ("seed", cli.seed.map(|v| v.to_string())),
        ("roi_threshold", cli.roi_threshold.map(|v| v.to_string())),
        ("variant", cli.variant.map(|v| v.to_string())),
        ("budget", cli.budget.map(|v| v.to_string())),
        ("epochs", cli.epochs.map(|v| v.to_string())),
    ];
    for item in &cli.set {
        let (k, v) = item
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{item}`"))?;
        flags.push((k, v.to_string()));
    }
    for (k, v) in flag_values {
        if let Some(v) = v {
            flags.push((k, v));
        }
    }
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<Vec<String>> {
    let cfg = resolve(cli)?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let lines = match cli.command {
        Command::Synth => pipeline::cmd_synth(&cfg)?,
        Command::Preprocess => pipeline::cmd_preprocess(&cfg)?,
        Command::Roi => pipeline::cmd_roi(&cfg)?,
        Command::Train => pipeline::cmd_train(&cfg)?,
        Command::Reference => pipeline::cmd_reference(&cfg)?,
        Command::Fuse => pipeline::cmd_fuse(&cfg)?,
        Command::Evaluate => pipeline::cmd_evaluate(&cfg)?,
        Command::All => pipeline::run_all(&cfg)?,
        Command::Config => cfg.echo(),
    };
    Ok(lines)
}

fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<pfoa_core::Error>())
        .map_or("other", pfoa_core::Error::kind);
    let message = format!("{err:#}").replace('\n', " ");
    format!("error: kind={kind} message={message:?}")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            log::debug!("{err:?}");
            eprintln!("{}", error_line(&err));
            ExitCode::FAILURE
        }
    }
}
