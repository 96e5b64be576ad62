//! `fairtree` command-line driver.
//!
//! Every subcommand prints a JSON document on stdout. Failures print a JSON
//! error object on stderr and exit with status 1 (2 for usage errors).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fairtree::builder::{grow_with_report, CovarianceBound, GrowthLimits};
use fairtree::data::{self, Dataset};
use fairtree::harness::{self, ExperimentConfig, OutputFormat};
use fairtree::metrics::evaluate_report;
use fairtree::oracle;
use fairtree::solver::SolverOptions;
use fairtree::tree::DecisionTree;
use log::info;
use serde_json::json;

#[derive(Parser)]
#[command(name = "fairtree", version, about = "Fairness-constrained logistic regression trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(clap::Args)]
struct SplitArgs {
    /// Use a seeded train/test split instead of the whole dataset.
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Run repeated train/test sweeps over a grid of covariance bounds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Overrides the worker count from the config.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Grow one tree and write it as JSON.
    Train {
        /// Dataset TOML file.
        #[arg(long)]
        dataset: PathBuf,
        /// Covariance bound, a positive number or `inf`.
        #[arg(long)]
        c: CovarianceBound,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        max_depth: usize,
        #[arg(long, default_value_t = 20)]
        min_samples_split: usize,
        #[arg(long, default_value_t = 10)]
        min_samples_leaf: usize,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Score a stored tree on a dataset (the test part with `--split-seed`).
    Eval {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Check the local-to-global parity results on random finite instances.
    VerifyTheory {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Load a dataset and print the ingestion report.
    LoadReport {
        #[arg(long)]
        dataset: PathBuf,
    },
}

fn load(dataset: &Path) -> Result<(Dataset, data::LoadReport)> {
    let spec = harness::load_dataset_spec(dataset)?;
    Ok(data::load(&spec)?)
}

/// Returns (train, test) halves, or the full dataset twice without a seed.
fn maybe_split(ds: Dataset, split: &SplitArgs) -> Result<(Dataset, Dataset)> {
    match split.split_seed {
        Some(seed) => Ok(data::split(&ds, split.train_fraction, seed)?),
        None => Ok((ds.clone(), ds)),
    }
}

fn print(value: &serde_json::Value) {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    // a closed pipe (`| head`) is not an error worth reporting
    if let Err(e) = writeln!(std::io::stdout(), "{text}") {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("{}", json!({ "error": "failed", "message": format!("writing stdout: {e}") }));
            std::process::exit(1);
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Sweep { config, out, format, workers } => {
            let mut config = ExperimentConfig::from_file(&config)?;
            if workers.is_some() {
                config.experiment.workers = workers;
                config.experiment.validate()?;
            }
            let (result, report) = harness::run_experiment(&config)?;
            let format = match format {
                Format::Json => OutputFormat::Json,
                Format::Csv => OutputFormat::Csv,
            };
            let (metrics, constant) = harness::emit(&result, &out, format)?;
            let trend = harness::constant_tree_trend(&result);
            print(&json!({
                "dataset": result.dataset,
                "metrics_file": metrics,
                "constant_tree_file": constant,
                "load_report": report,
                "constant_tree_trend": trend,
            }));
        }
        Command::Train { dataset, c, out, max_depth, min_samples_split, min_samples_leaf, split } => {
            let (ds, _) = load(&dataset)?;
            let (train, _) = maybe_split(ds, &split)?;
            let limits = GrowthLimits { max_depth, min_samples_split, min_samples_leaf, reject_unconverged: false };
            let grown = grow_with_report(&train, &limits.with_bound(c), &SolverOptions::default())?;
            fs::write(&out, grown.tree.to_json() + "\n").with_context(|| format!("writing {}", out.display()))?;
            info!("wrote {}", out.display());
            print(&json!({
                "tree": out,
                "c": c,
                "train_rows": train.len(),
                "nodes": grown.tree.len(),
                "depth": grown.tree.depth(),
                "constant": grown.tree.is_constant(),
                "fits": grown.stats.fits,
                "unconverged_fits": grown.stats.unconverged,
            }));
        }
        Command::Eval { tree, dataset, split } => {
            let text = fs::read_to_string(&tree).with_context(|| format!("reading {}", tree.display()))?;
            let tree = DecisionTree::from_json(&text)?;
            let (ds, _) = load(&dataset)?;
            let (_, test) = maybe_split(ds, &split)?;
            if tree.n_features() != test.n_features() {
                bail!("tree expects {} features, dataset has {}", tree.n_features(), test.n_features());
            }
            let predictions = tree.predict_rows(test.rows())?;
            let report = evaluate_report(&predictions, test.labels(), test.groups())?;
            print(&serde_json::to_value(report)?);
        }
        Command::VerifyTheory { instances, seed } => {
            let summary = oracle::verify_theory(instances, seed);
            print(&serde_json::to_value(&summary)?);
            if !summary.all_passed() {
                bail!("{} lemma and {} theorem checks failed", summary.lemma.fail, summary.theorem.fail);
            }
        }
        Command::LoadReport { dataset } => {
            let (_, report) = load(&dataset)?;
            print(&serde_json::to_value(report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim_end() }));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            eprintln!("{}", json!({ "error": "failed", "message": e.to_string(), "causes": chain }));
            ExitCode::FAILURE
        }
    }
}
