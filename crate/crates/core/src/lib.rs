//! Transfer-learning autotuner built on a Gaussian copula.
//!
//! Prior tuning runs from related tasks are quantile-filtered down to their
//! high-performing records, a Gaussian copula is fit over the per-parameter
//! marginals and their latent correlations, and new tasks are tuned by
//! conditionally sampling the model at the target task value. Because the
//! model only represents high-performing behavior, the very first samples
//! tend to land near the optimum, which is what makes few-shot budgets
//! viable; a hypergeometric success-probability estimate turns the model's
//! effective support size into a principled evaluation budget.
//!
//! The crate is organized along the pipeline:
//!
//! - [`space`]: schemas, configurations, exact enumeration and counting.
//! - [`dataset`]: CSV ingestion, per-task quantile filtering, coverage and
//!   marginal-divergence analyses.
//! - [`marginals`]: per-column invertible maps to standard-normal latents.
//! - [`copula`]: the joint model, conditional sampling, support estimation.
//! - [`budget`]: hypergeometric budget search with an explicit undefined
//!   outcome when filtering pruned too much of the space.
//! - [`tuner`]: the tune loop, evaluator plugins, and synthetic landscapes.

pub mod budget;
pub mod copula;
pub mod dataset;
pub mod marginals;
pub mod space;
pub mod tuner;

pub use budget::{min_budget, p_at_least_one, BudgetEstimate, BudgetInputs};
pub use copula::{random_batch, ConditionSpec, CopulaModel, SampleBatch};
pub use dataset::{Dataset, FilterReport, TuningRecord};
pub use space::{Configuration, ParamKind, ParameterDef, ParameterSpace, TaskFeature, Value};
pub use tuner::{
    collect_dataset, tune, tune_random, tune_with_model, Evaluator, Landscape, ShellEvaluator,
    Strategy, SyntheticEvaluator, TuneReport,
};
