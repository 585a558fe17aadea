//! Multi-seed experiment orchestration: parallel runs, metric aggregation,
//! hyperparameter sweeps, and CSV/JSON reporting.
//!
//! An experiment trains one configuration under every seed it lists,
//! evaluates each selected model on the test split, and aggregates
//! minority-class and macro accuracies over the seeds that finished. A seed
//! whose run aborts (e.g. diverges) is marked failed and excluded from the
//! aggregates rather than sinking the experiment. Runs execute concurrently —
//! `ROBUST_SHIFT_THREADS` caps the worker count — and results are collected
//! in seed order, so a report is bitwise-reproducible regardless of how many
//! threads executed it.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{SweepGrid, TrainConfig};
use crate::graph::{Dataset, Split};
use crate::model::ModelState;
use crate::trainer::{self, Evaluation, TrainOutcome};
use crate::{Error, Result};

/// Checkpoint rule used by every run, echoed in each report so the table
/// semantics stay self-describing.
pub const MODEL_SELECTION_NOTE: &str = "highest validation macro accuracy \
     (earliest epoch on ties); final-epoch model when the validation split \
     is empty";

/// Column order of the aggregate CSV emitted by [`ReportTable::to_csv`].
pub const REPORT_CSV_HEADER: &str =
    "method,noise_rate,minority_avg,minority_std,minority_max,overall_avg,overall_std";

/// Column order of the CSV emitted by [`sweep_csv`].
pub const SWEEP_CSV_HEADER: &str = "gamma,lambda1,lambda2,eta_q,\
     minority_avg,minority_std,minority_max,overall_avg,overall_std";

/// One seed's slice of a [`MetricsReport`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    /// True when the run aborted; every metric field below is then absent or
    /// zeroed and the seed is excluded from the aggregates.
    pub failed: bool,
    pub error: Option<String>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Test-split accuracy per class, percent; `None` marks a class with no
    /// test samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub overall_accuracy: Option<f64>,
    pub minority_accuracy: Option<f64>,
    /// Final group weights for methods that maintain them.
    pub final_q: Option<Vec<f64>>,
    pub nnr_clean_mean: Option<f64>,
    pub nnr_noisy_mean: Option<f64>,
    /// Per-epoch group weights for methods that maintain them, else empty.
    pub q_trajectory: Vec<Vec<f64>>,
    pub grad_norm_trace: Vec<f64>,
    pub duality_gap_proxy_trace: Vec<f64>,
}

/// Aggregated result of one multi-seed experiment.
///
/// Accuracies are percentages; `*_std` is the population standard deviation
/// over surviving seeds. Aggregates are `None` when no seed survived (or, for
/// the minority columns, when the minority class had no test samples). The
/// trace fields hold the epoch-wise mean over surviving seeds; per-seed
/// traces live in `per_seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    /// Label-noise rate the experiment was configured with (`data.alpha`),
    /// echoed so report tables can key rows on it.
    pub noise_rate: f64,
    pub num_classes: usize,
    pub minority_class: usize,
    pub model_selection: String,
    pub seeds: Vec<u64>,
    pub failed_seeds: Vec<u64>,
    pub per_seed: Vec<SeedMetrics>,
    pub minority_avg: Option<f64>,
    pub minority_std: Option<f64>,
    pub minority_max: Option<f64>,
    pub overall_avg: Option<f64>,
    pub overall_std: Option<f64>,
    pub q_trajectory: Vec<Vec<f64>>,
    pub grad_norm_trace: Vec<f64>,
    pub duality_gap_proxy_trace: Vec<f64>,
}

impl MetricsReport {
    /// The report's row for the aggregate CSV (see [`REPORT_CSV_HEADER`]).
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.method,
            self.noise_rate,
            fmt_cell(self.minority_avg),
            fmt_cell(self.minority_std),
            fmt_cell(self.minority_max),
            fmt_cell(self.overall_avg),
            fmt_cell(self.overall_std),
        )
    }
}

fn fmt_cell(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.4}"),
        None => "NA".to_string(),
    }
}

/// A finished experiment: the aggregate report plus each surviving seed's
/// selected model, in seed order.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub report: MetricsReport,
    pub models: Vec<(u64, ModelState)>,
}

/// Builds the worker pool for seed-level parallelism. `ROBUST_SHIFT_THREADS`
/// caps the thread count when set; unset falls back to one worker per core.
fn run_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var("ROBUST_SHIFT_THREADS") {
        let threads: usize = raw.trim().parse().unwrap_or(0);
        if threads == 0 {
            return Err(Error::Config(format!(
                "ROBUST_SHIFT_THREADS must be a positive integer, got `{raw}`"
            )));
        }
        builder = builder.num_threads(threads);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("could not build run pool: {e}")))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Epoch-wise mean of equal-length traces, truncated to the shortest.
fn mean_trace(traces: &[&[f64]]) -> Vec<f64> {
    let Some(len) = traces.iter().map(|t| t.len()).min() else {
        return Vec::new();
    };
    (0..len)
        .map(|i| traces.iter().map(|t| t[i]).sum::<f64>() / traces.len() as f64)
        .collect()
}

fn mean_q_trajectory(trajectories: &[&Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let Some(epochs) = trajectories.iter().map(|t| t.len()).min() else {
        return Vec::new();
    };
    (0..epochs)
        .map(|e| {
            let groups = trajectories[0][e].len();
            (0..groups)
                .map(|g| {
                    trajectories.iter().map(|t| t[e][g]).sum::<f64>() / trajectories.len() as f64
                })
                .collect()
        })
        .collect()
}

fn seed_metrics(seed: u64, outcome: &TrainOutcome, eval: &Evaluation, minority: usize) -> SeedMetrics {
    let final_q = outcome
        .cmo
        .as_ref()
        .map(|state| state.q().to_vec())
        .or_else(|| outcome.q_trajectory.last().cloned());
    SeedMetrics {
        seed,
        failed: false,
        error: None,
        best_epoch: outcome.best_epoch,
        best_val_accuracy: outcome.best_val_accuracy,
        per_class_accuracy: eval.per_class.clone(),
        overall_accuracy: Some(eval.overall),
        minority_accuracy: eval.per_class.get(minority).copied().flatten(),
        final_q,
        nnr_clean_mean: outcome.nnr_clean_mean,
        nnr_noisy_mean: outcome.nnr_noisy_mean,
        q_trajectory: outcome.q_trajectory.clone(),
        grad_norm_trace: outcome.trace.grad_norms.clone(),
        duality_gap_proxy_trace: outcome.trace.duality_gaps.clone(),
    }
}

fn failed_seed_metrics(seed: u64, error: &Error) -> SeedMetrics {
    SeedMetrics {
        seed,
        failed: true,
        error: Some(error.to_string()),
        best_epoch: 0,
        best_val_accuracy: 0.0,
        per_class_accuracy: Vec::new(),
        overall_accuracy: None,
        minority_accuracy: None,
        final_q: None,
        nnr_clean_mean: None,
        nnr_noisy_mean: None,
        q_trajectory: Vec::new(),
        grad_norm_trace: Vec::new(),
        duality_gap_proxy_trace: Vec::new(),
    }
}

/// Trains every seed in `config` on `dataset`, evaluates each selected model
/// on the test split, and aggregates over the seeds that finished.
pub fn run_experiment(config: &TrainConfig, dataset: &Dataset) -> Result<ExperimentResult> {
    config.validate()?;
    let num_classes = dataset.header.num_classes;
    if dataset.split(Split::Test).is_empty() {
        return Err(Error::InvalidInput(
            "experiment needs a nonempty test split".into(),
        ));
    }
    let minority = dataset.minority_class();

    let pool = run_pool()?;
    type SeedRun = (u64, std::result::Result<(TrainOutcome, Evaluation), Error>);
    let runs: Vec<SeedRun> = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| {
                let run = trainer::train(config, dataset, seed).and_then(|outcome| {
                    let test = dataset.split(Split::Test);
                    let eval = trainer::evaluate(&outcome.model, &test, num_classes)?;
                    Ok((outcome, eval))
                });
                (seed, run)
            })
            .collect()
    });

    let mut per_seed = Vec::with_capacity(runs.len());
    let mut failed_seeds = Vec::new();
    let mut models = Vec::new();
    let mut survivors: Vec<(u64, TrainOutcome, Evaluation)> = Vec::new();
    for (seed, run) in runs {
        match run {
            Ok((outcome, eval)) => {
                per_seed.push(seed_metrics(seed, &outcome, &eval, minority));
                models.push((seed, outcome.model.clone()));
                survivors.push((seed, outcome, eval));
            }
            Err(err) => {
                per_seed.push(failed_seed_metrics(seed, &err));
                failed_seeds.push(seed);
            }
        }
    }

    let minority_values: Vec<f64> = per_seed
        .iter()
        .filter_map(|s| s.minority_accuracy)
        .collect();
    let overall_values: Vec<f64> = per_seed
        .iter()
        .filter_map(|s| s.overall_accuracy)
        .collect();
    let (minority_avg, minority_std, minority_max) = if minority_values.is_empty() {
        (None, None, None)
    } else {
        (
            Some(mean(&minority_values)),
            Some(population_std(&minority_values)),
            Some(minority_values.iter().copied().fold(f64::MIN, f64::max)),
        )
    };
    let (overall_avg, overall_std) = if overall_values.is_empty() {
        (None, None)
    } else {
        (Some(mean(&overall_values)), Some(population_std(&overall_values)))
    };

    let grad_traces: Vec<&[f64]> = survivors
        .iter()
        .map(|(_, o, _)| o.trace.grad_norms.as_slice())
        .collect();
    let gap_traces: Vec<&[f64]> = survivors
        .iter()
        .map(|(_, o, _)| o.trace.duality_gaps.as_slice())
        .collect();
    let q_trajectories: Vec<&Vec<Vec<f64>>> =
        survivors.iter().map(|(_, o, _)| &o.q_trajectory).collect();

    let report = MetricsReport {
        method: config.method.name().to_string(),
        noise_rate: config.data.alpha,
        num_classes,
        minority_class: minority,
        model_selection: MODEL_SELECTION_NOTE.to_string(),
        seeds: config.seeds.clone(),
        failed_seeds,
        per_seed,
        minority_avg,
        minority_std,
        minority_max,
        overall_avg,
        overall_std,
        q_trajectory: mean_q_trajectory(&q_trajectories),
        grad_norm_trace: mean_trace(&grad_traces),
        duality_gap_proxy_trace: mean_trace(&gap_traces),
    };
    Ok(ExperimentResult { report, models })
}

/// Writes an experiment to `dir`: `report.json` plus one
/// `model_seed_<seed>.json` per surviving seed.
pub fn write_experiment(dir: &Path, result: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(&result.report)?;
    json.push('\n');
    fs::write(dir.join("report.json"), json)?;
    for (seed, model) in &result.models {
        model.save_json(&dir.join(format!("model_seed_{seed}.json")))?;
    }
    Ok(())
}

/// One grid point of a hyperparameter sweep.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub eta_q: f64,
}

/// A grid point together with its experiment report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub report: MetricsReport,
}

/// Runs the Cartesian product of the grid's axes over `dataset`. An empty
/// axis falls back to the base config's value, so a one-point grid reproduces
/// [`run_experiment`] exactly. Axis order in the output is gamma-major.
pub fn sweep(config: &TrainConfig, grid: &SweepGrid, dataset: &Dataset) -> Result<Vec<SweepRow>> {
    let axis = |values: &[f64], base: f64| -> Vec<f64> {
        if values.is_empty() {
            vec![base]
        } else {
            values.to_vec()
        }
    };
    let gammas = axis(&grid.gamma, config.nnr.gamma);
    let lambda1s = axis(&grid.lambda1, config.cmo.lambda1);
    let lambda2s = axis(&grid.lambda2, config.cmo.lambda2);
    let eta_qs = axis(&grid.eta_q, config.cmo.eta_q);

    let mut rows = Vec::new();
    for &gamma in &gammas {
        for &lambda1 in &lambda1s {
            for &lambda2 in &lambda2s {
                for &eta_q in &eta_qs {
                    let mut point_config = config.clone();
                    point_config.nnr.gamma = gamma;
                    point_config.cmo.lambda1 = lambda1;
                    point_config.cmo.lambda2 = lambda2;
                    point_config.cmo.eta_q = eta_q;
                    let result = run_experiment(&point_config, dataset)?;
                    rows.push(SweepRow {
                        point: SweepPoint { gamma, lambda1, lambda2, eta_q },
                        report: result.report,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Renders sweep rows as CSV keyed by the hyperparameter values
/// (see [`SWEEP_CSV_HEADER`]).
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            row.point.gamma,
            row.point.lambda1,
            row.point.lambda2,
            row.point.eta_q,
            fmt_cell(row.report.minority_avg),
            fmt_cell(row.report.minority_std),
            fmt_cell(row.report.minority_max),
            fmt_cell(row.report.overall_avg),
            fmt_cell(row.report.overall_std),
        ));
    }
    out
}

/// Aggregate table built from the experiment reports found in a directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<MetricsReport>,
}

impl ReportTable {
    /// Renders the table as CSV (see [`REPORT_CSV_HEADER`]); aggregates an
    /// experiment could not produce appear as `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Collects every experiment report under `dir` (files named `*.json` that
/// parse as [`MetricsReport`]; other JSON files, such as saved models, are
/// skipped) into a table sorted by method name, then noise rate, then file
/// name — so repeated invocations render byte-identical CSV.
pub fn report(dir: &Path) -> Result<ReportTable> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|path| path.extension().is_some_and(|ext| ext == "json"))
        .collect();
    files.sort();

    let mut keyed: Vec<(String, f64, usize, MetricsReport)> = Vec::new();
    for (index, path) in files.iter().enumerate() {
        let text = fs::read_to_string(path)?;
        if let Ok(report) = serde_json::from_str::<MetricsReport>(&text) {
            keyed.push((report.method.clone(), report.noise_rate, index, report));
        }
    }
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    Ok(ReportTable {
        rows: keyed.into_iter().map(|(_, _, _, r)| r).collect(),
    })
}
