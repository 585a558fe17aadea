//! Command-line interface: dataset generation, training, evaluation,
//! hyperparameter sweeps, bound diagnostics, and report aggregation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use robust_shift::bounds;
use robust_shift::config;
use robust_shift::experiment::{self, REPORT_CSV_HEADER};
use robust_shift::graph::{Dataset, Split};
use robust_shift::model::ModelState;
use robust_shift::synth;
use robust_shift::trainer;
use robust_shift::Result;

#[derive(Parser)]
#[command(name = "robust-shift", version, about = "Group-robust graph \
     classification under class imbalance, label noise, and environment \
     shift: synthetic benchmarks, reweighted training, and diagnostics.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the `data.*` keys of a config file.
    GenData {
        /// Config file (flat `section.key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Output dataset path (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every configured seed and write models plus a metrics report.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset path produced by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for `report.json` and per-seed models.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model on a dataset's test split.
    Evaluate {
        /// Model JSON written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the Cartesian product of a hyperparameter grid file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Grid file (`gamma = ...`, `lambda1 = ...`, `lambda2 = ...`,
        /// `eta_q = ...`; comma-separated values per axis).
        #[arg(long)]
        grid: PathBuf,
    },
    /// Emit coverage/margin/mean-separation diagnostics for a saved model.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Aggregate the experiment reports found in a directory into a CSV.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let train_config = config::load_config(&config)?;
            let dataset = synth::generate_dataset(&train_config.data)?;
            dataset.save_jsonl(&out)?;
            println!(
                "wrote {} instances ({} classes) to {}",
                dataset.instances.len(),
                dataset.header.num_classes,
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let train_config = config::load_config(&config)?;
            let dataset = Dataset::load_jsonl(&data)?;
            let result = experiment::run_experiment(&train_config, &dataset)?;
            experiment::write_experiment(&out, &result)?;
            println!("{REPORT_CSV_HEADER}");
            println!("{}", result.report.csv_row());
        }
        Command::Evaluate { model, data } => {
            let model = ModelState::load_json(&model)?;
            let dataset = Dataset::load_jsonl(&data)?;
            let test = dataset.split(Split::Test);
            let eval = trainer::evaluate(&model, &test, dataset.header.num_classes)?;
            println!("{}", serde_json::to_string_pretty(&eval)?);
        }
        Command::Sweep { config, grid } => {
            let train_config = config::load_config(&config)?;
            let grid = config::load_grid(&grid)?;
            let dataset = synth::generate_dataset(&train_config.data)?;
            let rows = experiment::sweep(&train_config, &grid, &dataset)?;
            print!("{}", experiment::sweep_csv(&rows));
        }
        Command::Diagnose { model, data } => {
            let model = ModelState::load_json(&model)?;
            let dataset = Dataset::load_jsonl(&data)?;
            let report = bounds::compute_bound_report(&model, &dataset)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Report { dir } => {
            let table = experiment::report(&dir)?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
