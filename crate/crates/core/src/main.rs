use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use seasons::runner::{
    analyze, calibrate_lr, calibrate_trials, load_pca3, run_single_cell, run_sweep, CALIBRATION_GAMMAS, CALIBRATION_LRS, CODE_VERSION,
    CONFIG_SCHEMA_VERSION, TRIAL_LADDER,
};
use seasons::{CellKey, SweepConfig};

fn long_version() -> &'static str {
    Box::leak(format!("{CODE_VERSION} (config schema {CONFIG_SCHEMA_VERSION})").into_boxed_str())
}

#[derive(Parser)]
#[command(name = "seasons", version = long_version(), about = "Transfer and interference sweeps for small RNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) the full sweep described by a config file.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run one cell, e.g. `modular_far_g0.001_s1`.
    RunCell {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        cell: CellKey,
    },
    /// Recompute metrics and summary tables from stored runs.
    Analyze {
        #[arg(long)]
        output: PathBuf,
    },
    /// Print a cell's joint 3-PC projection as JSON.
    ExportPca {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        cell: CellKey,
        /// Write to this file instead of stdout.
        #[arg(long)]
        to: Option<PathBuf>,
    },
    /// Try several learning rates and report divergence and learning.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lrs: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// Find the shortest phase length at which A1 converges in every cell.
    CalibrateTrials {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ladder: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn load_config(path: Option<PathBuf>, output: Option<PathBuf>) -> anyhow::Result<SweepConfig> {
    let mut cfg = match path {
        Some(p) => SweepConfig::load(&p)?,
        None => SweepConfig::default(),
    };
    if let Some(o) = output {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Sweep { config, output, workers } => {
            let mut cfg = load_config(config, output)?;
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let out = run_sweep(&cfg)?;
            let failed: Vec<_> = out.cells.iter().filter(|c| c.status != seasons::runner::CellStatus::Ok).collect();
            eprintln!(
                "{} cells ({} computed, {} reused) -> {}",
                out.cells.len(),
                out.computed,
                out.reused,
                out.root.display()
            );
            for c in &failed {
                eprintln!("  {} {}: {}", c.key, c.status.as_str(), c.error.as_deref().unwrap_or(""));
            }
        }
        Command::RunCell { config, output, cell } => {
            let cfg = load_config(config, output)?;
            let r = run_single_cell(&cfg, cell)?;
            println!("{}", serde_json::to_string_pretty(&seasons::runner::ResultRow::from(&r))?);
        }
        Command::Analyze { output } => {
            let out = analyze(&output)?;
            eprintln!("re-analysed {} cells in {}", out.cells.len(), output.display());
        }
        Command::ExportPca { output, cell, to } => {
            let v = load_pca3(&output, &cell)?;
            let text = serde_json::to_string_pretty(&v)?;
            match to {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{text}"),
            }
        }
        Command::Calibrate { config, lrs, gammas } => {
            let cfg = load_config(config, None)?;
            let lrs = lrs.unwrap_or_else(|| CALIBRATION_LRS.to_vec());
            let gammas = gammas.unwrap_or_else(|| CALIBRATION_GAMMAS.to_vec());
            let cal = calibrate_lr(&cfg, &lrs, &gammas)?;
            println!("{}", serde_json::to_string_pretty(&cal)?);
        }
        Command::CalibrateTrials { config, ladder, gammas } => {
            let cfg = load_config(config, None)?;
            let ladder = ladder.unwrap_or_else(|| TRIAL_LADDER.to_vec());
            let gammas = gammas.unwrap_or_else(|| CALIBRATION_GAMMAS.to_vec());
            let cal = calibrate_trials(&cfg, &ladder, &gammas)?;
            println!("{}", serde_json::to_string_pretty(&cal)?);
        }
        Command::DefaultConfig => print!("{}", SweepConfig::default().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
