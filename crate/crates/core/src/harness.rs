//! Repeated train/test sweeps over a grid of covariance bounds.
//!
//! Repetition `r` splits the data with seed `base_seed + r`, grows one tree per
//! bound on the training part and scores it on the test part. Repetitions run
//! in parallel and are reduced in `(repetition, c)` order, so the output does
//! not depend on the worker count.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{grow_with_report, BuildError, CovarianceBound, GrowthLimits};
use crate::data::{self, DataError, Dataset, DatasetSpec, LoadReport};
use crate::metrics::{evaluate_report, MetricsError, MetricsReport, METRIC_NAMES};
use crate::solver::SolverOptions;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
    #[error("malformed emitted file {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_owned(), source }
}

/// Either an inline dataset table or a path to a dataset TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetRef {
    Path(PathBuf),
    Inline(DatasetSpec),
}

pub fn default_c_grid() -> Vec<CovarianceBound> {
    [0.001, 0.005, 0.01, 0.05, 0.1, 0.5]
        .into_iter()
        .map(CovarianceBound::Finite)
        .chain([CovarianceBound::Unbounded])
        .collect()
}

fn default_repetitions() -> usize {
    30
}

fn default_train_fraction() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSettings {
    #[serde(default = "default_c_grid")]
    pub c_grid: Vec<CovarianceBound>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub base_seed: u64,
    /// Worker threads; `None` uses all cores.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            c_grid: default_c_grid(),
            repetitions: default_repetitions(),
            train_fraction: default_train_fraction(),
            base_seed: 0,
            workers: None,
        }
    }
}

impl ExperimentSettings {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Invalid(m.to_owned()));
        if self.c_grid.is_empty() {
            return bad("c_grid is empty");
        }
        if self.c_grid.iter().filter(|c| c.is_unbounded()).count() > 1 {
            return bad("c_grid lists inf more than once");
        }
        let finite: Vec<f64> = self.c_grid.iter().filter(|c| !c.is_unbounded()).map(|c| c.value()).collect();
        if finite.windows(2).any(|w| w[0] >= w[1]) {
            return bad("finite c_grid values must be strictly increasing");
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetRef,
    #[serde(default)]
    pub experiment: ExperimentSettings,
    #[serde(default)]
    pub growth: GrowthLimits,
    #[serde(default)]
    pub solver: SolverOptions,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| HarnessError::Config { path: path.to_owned(), message: e.to_string() })
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_owned).unwrap_or_default()
}

/// Reads a dataset TOML, resolving `source_path` against the file's folder.
pub fn load_dataset_spec(path: &Path) -> Result<DatasetSpec, HarnessError> {
    let spec: DatasetSpec = read_toml(path)?;
    Ok(spec.resolved(&parent_dir(path)))
}

impl ExperimentConfig {
    /// Reads an experiment TOML and inlines its dataset spec with all paths
    /// resolved.
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let mut config: ExperimentConfig = read_toml(path)?;
        let base = parent_dir(path);
        config.dataset = DatasetRef::Inline(match config.dataset {
            DatasetRef::Path(p) => load_dataset_spec(&base.join(p))?,
            DatasetRef::Inline(spec) => spec.resolved(&base),
        });
        config.experiment.validate()?;
        Ok(config)
    }

    pub fn dataset_spec(&self) -> Result<&DatasetSpec, HarnessError> {
        match &self.dataset {
            DatasetRef::Inline(spec) => Ok(spec),
            DatasetRef::Path(p) => Err(HarnessError::Invalid(format!("dataset {} was not resolved", p.display()))),
        }
    }
}

/// Summary of one metric at one bound over all repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: Option<f64>,
    pub ci_halfwidth: Option<f64>,
    pub n_defined: usize,
    /// One entry per repetition, `null` where the metric was undefined.
    pub values: Vec<Option<f64>>,
}

impl MetricSummary {
    /// Mean of the defined values with a 95% normal-approximation half-width
    /// `1.96·s/√n` (sample standard deviation; needs two values).
    pub fn from_values(metric: &str, values: Vec<Option<f64>>) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let n = defined.len();
        let mean = (n > 0).then(|| defined.iter().sum::<f64>() / n as f64);
        let ci_halfwidth = mean.filter(|_| n > 1).map(|m| {
            let var = defined.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        });
        Self { metric: metric.to_owned(), mean, ci_halfwidth, n_defined: n, values }
    }

    pub fn mean_abs(&self) -> Option<f64> {
        let defined: Vec<f64> = self.values.iter().flatten().map(|v| v.abs()).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub c: CovarianceBound,
    pub constant_tree_count: usize,
    pub fits: usize,
    pub unconverged_fits: usize,
    pub metrics: Vec<MetricSummary>,
}

impl BoundResult {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub dataset: String,
    pub repetitions: usize,
    pub train_fraction: f64,
    pub base_seed: u64,
    pub interval: String,
    pub results: Vec<BoundResult>,
}

impl SweepResult {
    pub fn at(&self, c: CovarianceBound) -> Option<&BoundResult> {
        self.results.iter().find(|r| r.c == c)
    }
}

/// What one repetition produced at one bound.
struct Cell {
    report: MetricsReport,
    constant: bool,
    fits: usize,
    unconverged: usize,
}

fn run_repetition(
    data: &Dataset,
    settings: &ExperimentSettings,
    growth: &GrowthLimits,
    solver: &SolverOptions,
    rep: usize,
) -> Result<Vec<Cell>, HarnessError> {
    let seed = settings.base_seed.wrapping_add(rep as u64);
    let (train, test) = data::split(data, settings.train_fraction, seed)?;
    settings
        .c_grid
        .iter()
        .map(|&c| {
            let grown = grow_with_report(&train, &growth.with_bound(c), solver)?;
            let predictions = grown.tree.predict_rows(test.rows()).map_err(BuildError::from)?;
            let report = evaluate_report(&predictions, test.labels(), test.groups())?;
            Ok(Cell {
                report,
                constant: grown.tree.is_constant(),
                fits: grown.stats.fits,
                unconverged: grown.stats.unconverged,
            })
        })
        .collect()
}

/// Runs the full sweep on an already loaded dataset.
pub fn run_sweep(
    name: &str,
    data: &Dataset,
    settings: &ExperimentSettings,
    growth: &GrowthLimits,
    solver: &SolverOptions,
) -> Result<SweepResult, HarnessError> {
    settings.validate()?;
    let run = || -> Result<Vec<Vec<Cell>>, HarnessError> {
        (0..settings.repetitions)
            .into_par_iter()
            .map(|rep| run_repetition(data, settings, growth, solver, rep))
            .collect()
    };
    let cells = match settings.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| HarnessError::Pool(e.to_string()))?
            .install(run)?,
        None => run()?,
    };

    let results = settings
        .c_grid
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let column: Vec<&Cell> = cells.iter().map(|rep| &rep[k]).collect();
            let metrics = METRIC_NAMES
                .iter()
                .map(|m| MetricSummary::from_values(m, column.iter().map(|cell| cell.report.get(m)).collect()))
                .collect();
            let result = BoundResult {
                c,
                constant_tree_count: column.iter().filter(|cell| cell.constant).count(),
                fits: column.iter().map(|cell| cell.fits).sum(),
                unconverged_fits: column.iter().map(|cell| cell.unconverged).sum(),
                metrics,
            };
            if result.unconverged_fits > 0 {
                info!("{name} c={c}: {} of {} fits did not converge", result.unconverged_fits, result.fits);
            }
            result
        })
        .collect();
    Ok(SweepResult {
        dataset: name.to_owned(),
        repetitions: settings.repetitions,
        train_fraction: settings.train_fraction,
        base_seed: settings.base_seed,
        interval: "mean ± 1.96·s/√n_defined".to_owned(),
        results,
    })
}

/// Loads the configured dataset and runs the sweep.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(SweepResult, LoadReport), HarnessError> {
    let spec = config.dataset_spec()?;
    let (data, report) = data::load(spec)?;
    let result = run_sweep(&spec.name, &data, &config.experiment, &config.growth, &config.solver)?;
    Ok((result, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

/// One row of the summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub c: CovarianceBound,
    pub metric: String,
    pub mean: Option<f64>,
    pub ci_halfwidth: Option<f64>,
    pub n_defined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantTreeRow {
    pub dataset: String,
    pub c: CovarianceBound,
    pub constant_tree_count: usize,
    pub repetitions: usize,
}

impl SweepResult {
    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.results
            .iter()
            .flat_map(|r| {
                r.metrics.iter().map(|m| SummaryRow {
                    dataset: self.dataset.clone(),
                    c: r.c,
                    metric: m.metric.clone(),
                    mean: m.mean,
                    ci_halfwidth: m.ci_halfwidth,
                    n_defined: m.n_defined,
                })
            })
            .collect()
    }

    pub fn constant_rows(&self) -> Vec<ConstantTreeRow> {
        self.results
            .iter()
            .map(|r| ConstantTreeRow {
                dataset: self.dataset.clone(),
                c: r.c,
                constant_tree_count: r.constant_tree_count,
                repetitions: self.repetitions,
            })
            .collect()
    }
}

/// Paths of the metrics file and the constant-tree file for a dataset.
pub fn output_paths(dir: &Path, dataset: &str, format: OutputFormat) -> (PathBuf, PathBuf) {
    let ext = match format {
        OutputFormat::Json => "json",
        OutputFormat::Csv => "csv",
    };
    (dir.join(format!("{dataset}_metrics.{ext}")), dir.join(format!("{dataset}_constant_trees.{ext}")))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| HarnessError::Io { path: path.to_owned(), source: e.into() })?;
    for row in rows {
        w.serialize(row).map_err(|e| HarnessError::Io { path: path.to_owned(), source: e.into() })?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes the metrics file and the constant-tree file; returns their paths.
pub fn emit(result: &SweepResult, dir: &Path, format: OutputFormat) -> Result<(PathBuf, PathBuf), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (metrics_path, constant_path) = output_paths(dir, &result.dataset, format);
    match format {
        OutputFormat::Json => {
            fs::write(&metrics_path, pretty(result) + "\n").map_err(io_err(&metrics_path))?;
            fs::write(&constant_path, pretty(&result.constant_rows()) + "\n").map_err(io_err(&constant_path))?;
        }
        OutputFormat::Csv => {
            write_csv(&metrics_path, &result.summary_rows())?;
            write_csv(&constant_path, &result.constant_rows())?;
        }
    }
    Ok((metrics_path, constant_path))
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("sweep results serialize")
}

pub fn parse_metrics_json(path: &Path) -> Result<SweepResult, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Parse { path: path.to_owned(), message: e.to_string() })
}

pub fn parse_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let parse_err = |e: csv::Error| HarnessError::Parse { path: path.to_owned(), message: e.to_string() };
    let mut reader = csv::Reader::from_path(path).map_err(parse_err)?;
    reader.deserialize().collect::<Result<_, _>>().map_err(parse_err)
}

/// Result of the soft monotonicity check on constant-tree counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendCheck {
    pub monotone: bool,
    /// Pairs of consecutive bounds where the count went up with `c`.
    pub violations: Vec<(CovarianceBound, CovarianceBound, usize, usize)>,
}

/// Checks that constant trees get no more frequent as `c` grows. Violations
/// are logged, not treated as errors.
pub fn constant_tree_trend(result: &SweepResult) -> TrendCheck {
    let mut ordered: Vec<&BoundResult> = result.results.iter().collect();
    ordered.sort_by(|a, b| a.c.value().total_cmp(&b.c.value()));
    let violations: Vec<_> = ordered
        .windows(2)
        .filter(|w| w[1].constant_tree_count > w[0].constant_tree_count)
        .map(|w| (w[0].c, w[1].c, w[0].constant_tree_count, w[1].constant_tree_count))
        .collect();
    for (c0, c1, n0, n1) in &violations {
        warn!("{}: constant trees rose from {n0} at c={c0} to {n1} at c={c1}", result.dataset);
    }
    TrendCheck { monotone: violations.is_empty(), violations }
}
