//! Command-line driver for the federated simulator.
//!
//! Exit codes: `0` success, `1` configuration or input error, `2` a run
//! diverged.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use fedskip_core::config::{ConfigDocument, SweepCell};
use fedskip_core::io::{records_to_jsonl, summary_to_csv, write_atomic};
use fedskip_core::metrics::{self, Baseline};
use fedskip_core::orchestrator::{self, format_beta};
use fedskip_core::{
    parse_config, DatasetSpec, Error, ExperimentConfig, Result, RoundRecord, RunOptions, StrategyConfig, SummaryRow,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fedskip", version, about = "Federated learning simulator with skip aggregation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Overrides the seed from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads; defaults to all cores. Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write records.jsonl, summary.csv and config.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Expand a sweep document and write one JSONL per cell plus sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare independent per-client training with one model passed across clients.
    Toy {
        /// Experiment config; defaults to 5-class blobs split over 10 clients at beta 0.5.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute summaries and divergence-bound margins from recorded JSONL.
    Analyze {
        #[arg(long)]
        records: PathBuf,
        /// Baseline run whose best accuracy is the target for speedups.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Gradient-norm bound G; enables the divergence-bound check.
        #[arg(long, requires_all = ["lr", "local_steps"])]
        grad_bound: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        local_steps: Option<usize>,
        #[arg(long, default_value_t = 1)]
        delta: usize,
    },
    /// Write the generated client and test data as TSV files.
    ExportData {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_divergence() {
        EXIT_DIVERGED
    } else {
        EXIT_CONFIG
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Run { config, common } => run(&config, &common),
        Command::Sweep { config, common } => sweep(&config, &common),
        Command::Toy { config, common } => toy(config.as_deref(), &common),
        Command::Analyze { records, baseline, grad_bound, lr, local_steps, delta } => {
            analyze(&records, baseline.as_deref(), grad_bound.zip(lr).zip(local_steps), delta)
        }
        Command::ExportData { config, common } => export_data(&config, &common),
    }
}

fn load_experiment(path: &Path, common: &Common) -> Result<ExperimentConfig> {
    match parse_config(path)? {
        ConfigDocument::Experiment(mut cfg) => {
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            Ok(cfg)
        }
        ConfigDocument::Sweep(_) => Err(Error::config("sweep", "this command takes a single experiment; use `sweep`")),
    }
}

fn with_pool<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => Ok(rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build()?.install(job)),
        None => Ok(job()),
    }
}

fn run(path: &Path, common: &Common) -> Result<i32> {
    let cfg = load_experiment(path, common)?;
    let output = with_pool(common.threads, || orchestrator::run_federated(&cfg, &RunOptions::default()))??;
    fs::create_dir_all(&common.out_dir)?;
    let row = SummaryRow::from_run(&cfg, &output.records, Some(output.final_accuracy));
    write_atomic(&common.out_dir.join("records.jsonl"), records_to_jsonl(&output.records)?.as_bytes())?;
    write_atomic(&common.out_dir.join("summary.csv"), summary_to_csv(&[row])?.as_bytes())?;
    write_atomic(&common.out_dir.join("config.json"), format!("{}\n", cfg.to_json_pretty()?).as_bytes())?;
    println!(
        "{}: final accuracy {:.4}, best {:.4}, {} aggregations",
        cfg.strategy.label(),
        output.final_accuracy,
        metrics::best_accuracy(&output.records).unwrap_or(f64::NAN),
        output.records.last().map_or(0, |r| r.aggregations_so_far)
    );
    Ok(EXIT_OK)
}

enum CellOutcome {
    Finished { records: Vec<RoundRecord>, final_accuracy: f64 },
    Diverged,
}

fn run_cell(cell: &SweepCell, cells_dir: &Path) -> Result<CellOutcome> {
    match orchestrator::run_federated(&cell.config, &RunOptions::default()) {
        Ok(output) => {
            write_atomic(
                &cells_dir.join(format!("{}.jsonl", cell.name())),
                records_to_jsonl(&output.records)?.as_bytes(),
            )?;
            Ok(CellOutcome::Finished { records: output.records, final_accuracy: output.final_accuracy })
        }
        Err(e) if e.is_divergence() => {
            eprintln!("{}: {e}", cell.name());
            Ok(CellOutcome::Diverged)
        }
        Err(e) => Err(e),
    }
}

/// Summary rows for a finished sweep. Speedups compare each cell against the
/// FedAvg cell with the same beta and seed, when the sweep contains one.
pub fn sweep_rows(cells: &[SweepCell], outcomes: &[Option<(&[RoundRecord], f64)>]) -> Vec<SummaryRow> {
    let baseline_for = |cell: &SweepCell| {
        cells.iter().zip(outcomes).find_map(|(other, outcome)| {
            let same =
                other.strategy == StrategyConfig::FedAvg {} && other.beta == cell.beta && other.seed == cell.seed;
            same.then(|| outcome.and_then(|(records, _)| Baseline::from_records(records))).flatten()
        })
    };
    cells
        .iter()
        .zip(outcomes)
        .map(|(cell, outcome)| match outcome {
            Some((records, final_accuracy)) => {
                let mut row = SummaryRow::from_run(&cell.config, records, Some(*final_accuracy));
                if let Some(baseline) = baseline_for(cell) {
                    row.apply_efficiency(&metrics::efficiency_summary(records, &baseline));
                }
                row
            }
            None => SummaryRow::for_config(&cell.config, "diverged"),
        })
        .collect()
}

fn sweep(path: &Path, common: &Common) -> Result<i32> {
    let mut spec = match parse_config(path)? {
        ConfigDocument::Sweep(spec) => spec,
        ConfigDocument::Experiment(_) => return Err(Error::config("sweep", "missing top-level `sweep` key")),
    };
    if let Some(seed) = common.seed {
        spec.base.seed = seed;
        spec.sweep.seeds = vec![seed];
    }
    let cells = spec.cells()?;
    let cells_dir = common.out_dir.join("cells");
    fs::create_dir_all(&cells_dir)?;
    let outcomes = with_pool(common.threads, || {
        cells.par_iter().map(|cell| run_cell(cell, &cells_dir)).collect::<Result<Vec<_>>>()
    })??;
    let views: Vec<Option<(&[RoundRecord], f64)>> = outcomes
        .iter()
        .map(|o| match o {
            CellOutcome::Finished { records, final_accuracy } => Some((records.as_slice(), *final_accuracy)),
            CellOutcome::Diverged => None,
        })
        .collect();
    let rows = sweep_rows(&cells, &views);
    write_atomic(&common.out_dir.join("sweep.csv"), summary_to_csv(&rows)?.as_bytes())?;
    let diverged = views.iter().filter(|v| v.is_none()).count();
    println!("{} cells, {} diverged", cells.len(), diverged);
    Ok(EXIT_OK)
}

/// Blobs with 5 classes in 20 dimensions, 2000 training examples, split at
/// beta 0.5 over 10 clients.
pub fn default_toy_config() -> ExperimentConfig {
    ExperimentConfig::new(DatasetSpec::Blobs { num_classes: 5, input_dim: 20, n_total: 2500, class_sep: 3.0 })
}

fn toy(path: Option<&Path>, common: &Common) -> Result<i32> {
    let mut cfg = match path {
        Some(p) => load_experiment(p, common)?,
        None => default_toy_config(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let (local, cross) = with_pool(common.threads, || -> Result<(f64, f64)> {
        let data = orchestrator::prepare_data(&cfg)?;
        Ok((orchestrator::run_local_mode_on(&data, &cfg)?, orchestrator::run_cross_mode_on(&data, &cfg)?))
    })??;
    println!("beta {} seed {}", format_beta(cfg.partition.beta), cfg.seed);
    println!("local accuracy {local:.4}");
    println!("cross accuracy {cross:.4}");
    Ok(EXIT_OK)
}

fn analyze(path: &Path, baseline: Option<&Path>, bound: Option<((f64, f64), usize)>, delta: usize) -> Result<i32> {
    let records = fedskip_core::io::read_records_jsonl(path)?;
    let last = records.last().ok_or(Error::EmptyDataset)?;
    println!("rounds {}", records.len());
    println!("aggregations {}", last.aggregations_so_far);
    println!("communication rounds {}", last.comm_rounds_so_far);
    if let Some(best) = metrics::best_accuracy(&records) {
        println!("best accuracy {best:.4}");
    }
    if let Some(acc) = records.iter().rev().find_map(|r| r.test_accuracy) {
        println!("last accuracy {acc:.4}");
    }
    if let Some(drift) = metrics::mean_drift_variance(&records) {
        println!("mean drift variance {drift:.6e}");
    }
    if let Some(base_path) = baseline {
        let base_records = fedskip_core::io::read_records_jsonl(base_path)?;
        let base = Baseline::from_records(&base_records)
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no accuracy records", base_path.display())))?;
        let s = metrics::efficiency_summary(&records, &base);
        println!("target accuracy {:.4} (baseline rounds {})", s.target_accuracy, base.rounds_to_best);
        match (s.rounds_to_target, s.aggregations_to_target, s.speedup_vs_baseline) {
            (Some(r), Some(a), Some(x)) => println!("rounds to target {r}, aggregations {a}, speedup {x:.2}x"),
            _ => println!("target not reached"),
        }
    }
    if let Some(((grad_bound, lr), local_steps)) = bound {
        let drift = records.iter().filter_map(|r| r.drift_variance.map(|d| (r.round, orchestrator::Phase::End, d)));
        let report = metrics::bound_report_from_drift(drift, delta, lr, local_steps, grad_bound);
        println!("divergence bound {:.6e}", report.rhs);
        match report.min_margin() {
            Some(m) => println!("minimum margin {m:.6e} ({})", if report.holds() { "holds" } else { "violated" }),
            None => println!("no drift values recorded"),
        }
    }
    Ok(EXIT_OK)
}

fn export_data(path: &Path, common: &Common) -> Result<i32> {
    let cfg = load_experiment(path, common)?;
    let data = orchestrator::prepare_data(&cfg)?;
    fedskip_core::data::write_federated_dir(&common.out_dir, &data.clients, &data.test)?;
    println!(
        "wrote {} clients and {} test examples to {}",
        data.clients.len(),
        data.test.len(),
        common.out_dir.display()
    );
    Ok(EXIT_OK)
}
