//! `gctuner`: fit copula models to prior tuning data, predict evaluation
//! budgets, and run few-shot transfer tuning against shell or synthetic
//! evaluators.
//!
//! Exit codes: 0 success, 1 usage, 2 data/validation, 3 evaluator failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gctuner::budget::{
    DEFAULT_ALLOWANCE, DEFAULT_CONFIDENCE, DEFAULT_IDEAL_FRACTION, DEFAULT_MAX_BUDGET,
};
use gctuner::dataset::DEFAULT_QUANTILE;

#[derive(Parser)]
#[command(name = "gctuner", version, about, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a copula model to quantile-filtered source datasets.
    Fit(FitArgs),
    /// Generate unique configurations from a fitted model.
    Sample(SampleArgs),
    /// Estimate the evaluation budget from space sizes or a fitted model.
    Budget(BudgetArgs),
    /// Run the few-shot transfer loop against an evaluator.
    Tune(TuneArgs),
    /// Sweep filtering quantiles and report coverage and divergence.
    Analyze(AnalyzeArgs),
    /// Compare copula tuning against the random baseline on a synthetic
    /// landscape over several seeds.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Space schema file (TOML).
    #[arg(long)]
    space: PathBuf,
    /// Source dataset CSV; repeat for several files.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Per-task filtering quantile in (0, 1].
    #[arg(long, default_value_t = DEFAULT_QUANTILE)]
    quantile: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for model.json, filter_report.json, run_metadata.json.
    #[arg(long, env = "GCTUNER_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Fitted model file (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Task value to condition on.
    #[arg(long)]
    task: f64,
    /// Number of unique configurations to generate.
    #[arg(long, short = 'n', default_value_t = 10)]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; samples print to stdout when omitted.
    #[arg(long, env = "GCTUNER_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BudgetArgs {
    /// Full space size |C| (with --effective; alternative to --model).
    #[arg(long, requires = "effective", conflicts_with = "model")]
    full: Option<u128>,
    /// Effective generable-space size |C_eff|.
    #[arg(long, requires = "full")]
    effective: Option<u128>,
    /// Fitted model file; |C_eff| is then estimated by sampling.
    #[arg(long, requires = "task")]
    model: Option<PathBuf>,
    /// Task value to condition on when estimating from a model.
    #[arg(long)]
    task: Option<f64>,
    /// Raw draws used for the support estimate.
    #[arg(long, default_value_t = 10_000)]
    trials: u64,
    #[arg(long, default_value_t = DEFAULT_IDEAL_FRACTION)]
    ideal_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_ALLOWANCE)]
    allowance: f64,
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE)]
    confidence: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_BUDGET)]
    max_budget: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for budget.json and curve.csv (also printed).
    #[arg(long, env = "GCTUNER_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    /// Space schema file (with --data; alternative to --model).
    #[arg(long, requires = "data", conflicts_with = "model")]
    space: Option<PathBuf>,
    /// Source dataset CSV; repeat for several files.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Pre-fitted model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Target task value.
    #[arg(long)]
    task: f64,
    /// Evaluation budget: a count, or `auto` to use the predicted budget.
    #[arg(long, default_value = "30")]
    budget: String,
    /// Evaluator: `synthetic:<landscape>` or `shell:<command template>`
    /// with `{name}` placeholders for every parameter and the task feature.
    #[arg(long)]
    evaluator: String,
    /// Regex with one capture group extracting the objective from shell
    /// evaluator output.
    #[arg(long)]
    objective_pattern: Option<String>,
    /// Per-run timeout for shell evaluations.
    #[arg(long, default_value_t = 600)]
    timeout_secs: u64,
    /// Runs per shell evaluation; the first is discarded and the rest
    /// averaged.
    #[arg(long, default_value_t = gctuner::tuner::DEFAULT_SHELL_REPEATS)]
    repeats: u32,
    #[arg(long, default_value_t = DEFAULT_QUANTILE)]
    quantile: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for tune.csv, summary.json, run_metadata.json.
    #[arg(long, env = "GCTUNER_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    space: PathBuf,
    /// Dataset CSV; repeat for several files.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Reference dataset CSV; defaults to the top 10% of the data itself.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Output directory for analyze.csv (also printed).
    #[arg(long, env = "GCTUNER_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Synthetic landscape name; use an unknown name to list the options.
    #[arg(long)]
    landscape: String,
    /// Independent seeds to run per strategy.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_BUDGET)]
    budget: u64,
    #[arg(long, default_value_t = DEFAULT_QUANTILE)]
    quantile: f64,
    /// Evaluations collected per source task before tuning.
    #[arg(long, default_value_t = 200)]
    source_evals: usize,
    /// Output directory for per-seed trajectories and the aggregate table.
    #[arg(long, env = "GCTUNER_OUT")]
    out: PathBuf,
}

/// Failure classified by exit code.
pub(crate) enum CliError {
    Usage(String),
    Data(String),
    Evaluator(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Evaluator(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Evaluator(m) => m,
        }
    }
}

impl From<gctuner::space::SpaceError> for CliError {
    fn from(e: gctuner::space::SpaceError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<gctuner::dataset::DataError> for CliError {
    fn from(e: gctuner::dataset::DataError) -> Self {
        match e {
            gctuner::dataset::DataError::BadQuantile(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<gctuner::copula::CopulaError> for CliError {
    fn from(e: gctuner::copula::CopulaError) -> Self {
        use gctuner::copula::CopulaError::*;
        match e {
            BadSampleCount | TooFewTrials { .. } => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<gctuner::budget::BudgetError> for CliError {
    fn from(e: gctuner::budget::BudgetError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<gctuner::tuner::TuneError> for CliError {
    fn from(e: gctuner::tuner::TuneError) -> Self {
        use gctuner::tuner::TuneError::*;
        match e {
            AllEvaluationsFailed { .. } => CliError::Evaluator(e.to_string()),
            Template(_) | BadBudget => CliError::Usage(e.to_string()),
            SourceSpansOneTask => CliError::Data(e.to_string()),
            Data(d) => CliError::from(d),
            Copula(c) => CliError::from(c),
            Csv(c) => CliError::Data(c.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful exits; everything else is a
            // usage error (exit 1).
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Fit(args) => commands::fit(args),
        Command::Sample(args) => commands::sample(args),
        Command::Budget(args) => commands::budget(args),
        Command::Tune(args) => commands::tune(args),
        Command::Analyze(args) => commands::analyze(args),
        Command::Simulate(args) => commands::simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
