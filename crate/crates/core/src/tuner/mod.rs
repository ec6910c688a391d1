//! The end-to-end few-shot transfer loop: filter prior data, fit the copula,
//! condition on the target task, sample unique candidates, and evaluate them
//! in order. A uniform-random baseline shares the same loop and accounting.

mod evaluator;
mod landscape;

pub use evaluator::{EvalFailure, Evaluator, ShellEvaluator, DEFAULT_SHELL_REPEATS};
pub use landscape::{Landscape, SyntheticEvaluator, SOURCE_TASKS, TARGET_TASKS};

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::copula::{random_batch, ConditionSpec, CopulaError, CopulaModel, SampleBatch};
use crate::dataset::{DataError, Dataset, TuningRecord};
use crate::space::{Configuration, Fnv64, ParameterSpace};

#[derive(Debug, Error)]
pub enum TuneError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Copula(#[from] CopulaError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("budget must be at least 1")]
    BadBudget,
    #[error("source data spans a single task value; transfer needs at least 2")]
    SourceSpansOneTask,
    #[error("every evaluation failed; last failure: {last}")]
    AllEvaluationsFailed { last: String },
    #[error("shell evaluator template error: {0}")]
    Template(String),
}

/// Which sampler proposed the configurations of a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Copula,
    Random,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Copula => "gc",
            Strategy::Random => "random",
        }
    }
}

/// One evaluated configuration in a tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    /// 1-based evaluation index.
    pub index: u64,
    pub config: Configuration,
    pub objective: Option<f64>,
    pub failure: Option<String>,
    /// Best objective seen up to and including this row; monotone
    /// nonincreasing over the run.
    pub best_so_far: Option<f64>,
    pub elapsed: Duration,
}

/// Full record of one tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneReport {
    pub strategy: Strategy,
    pub target_task: f64,
    pub budget: u64,
    pub quantile: Option<f64>,
    pub seed: u64,
    /// Sampling could not produce `budget` unique configurations; the run
    /// stopped early.
    pub saturated: bool,
    pub rows: Vec<EvalRow>,
}

impl TuneReport {
    pub fn best_row(&self) -> Option<&EvalRow> {
        self.rows
            .iter()
            .filter(|r| r.objective.is_some())
            .min_by(|a, b| a.objective.partial_cmp(&b.objective).unwrap())
    }

    pub fn best_objective(&self) -> Option<f64> {
        self.best_row().and_then(|r| r.objective)
    }

    pub fn best_config(&self) -> Option<&Configuration> {
        self.best_row().map(|r| &r.config)
    }

    /// Ratio of a designated baseline objective to the best found; above 1
    /// means the run improved on the baseline.
    pub fn speedup(&self, baseline_objective: f64) -> Option<f64> {
        assert!(
            baseline_objective > 0.0,
            "baseline objective must be positive"
        );
        self.best_objective().map(|best| baseline_objective / best)
    }

    /// Writes the per-evaluation CSV. Deliberately excludes wall-clock
    /// timing so replays with the same seed are byte-identical.
    pub fn write_csv<W: std::io::Write>(
        &self,
        space: &ParameterSpace,
        writer: W,
    ) -> Result<(), TuneError> {
        let mut csv = csv::Writer::from_writer(writer);
        let mut header = vec!["evaluation".to_string()];
        header.extend(space.tunables().iter().map(|p| p.name.clone()));
        header.push(space.task_feature().name.clone());
        header.push("objective".into());
        header.push("best_so_far".into());
        header.push("status".into());
        csv.write_record(&header)?;
        for row in &self.rows {
            let mut record = vec![row.index.to_string()];
            record.extend(row.config.values().iter().map(|v| v.to_string()));
            record.push(self.target_task.to_string());
            record.push(row.objective.map(|o| o.to_string()).unwrap_or_default());
            record.push(row.best_so_far.map(|o| o.to_string()).unwrap_or_default());
            record.push(match &row.failure {
                None => "ok".into(),
                Some(msg) => format!("failed: {msg}"),
            });
            csv.write_record(&record)?;
        }
        csv.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Stable sub-seed derivation so each pipeline stage gets an independent
/// stream from one user-facing seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Fnv64::new();
    h.write(label.as_bytes());
    splitmix64(seed ^ h.finish())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// The copula transfer loop: filter the source per task, fit, condition on
/// the target, sample `budget` unique configurations, and evaluate each in
/// order. Failed evaluations consume budget; the run errors only if every
/// evaluation failed.
pub fn tune(
    source: &Dataset,
    target_task: f64,
    budget: u64,
    quantile: f64,
    seed: u64,
    evaluator: &mut dyn Evaluator,
) -> Result<TuneReport, TuneError> {
    if budget == 0 {
        return Err(TuneError::BadBudget);
    }
    if source.task_groups().len() < 2 {
        return Err(TuneError::SourceSpansOneTask);
    }
    let filtered = source.quantile_filter(quantile)?;
    let model = CopulaModel::fit_seeded(&filtered, Some(quantile), derive_seed(seed, "fit"))?;
    tune_with_model(&model, target_task, budget, seed, evaluator)
}

/// The evaluation half of [`tune`], reusable with a pre-fitted model.
pub fn tune_with_model(
    model: &CopulaModel,
    target_task: f64,
    budget: u64,
    seed: u64,
    evaluator: &mut dyn Evaluator,
) -> Result<TuneReport, TuneError> {
    if budget == 0 {
        return Err(TuneError::BadBudget);
    }
    let cond = ConditionSpec::new(model.space(), target_task)?;
    let batch = model.sample(Some(&cond), budget, derive_seed(seed, "sample"), None)?;
    let rows = run_evaluations(&batch, target_task, evaluator)?;
    Ok(TuneReport {
        strategy: Strategy::Copula,
        target_task,
        budget,
        quantile: model.quantile(),
        seed,
        saturated: batch.saturated,
        rows,
    })
}

/// Uniform-random baseline: same dedup contract, same evaluation loop.
pub fn tune_random(
    space: &Arc<ParameterSpace>,
    target_task: f64,
    budget: u64,
    seed: u64,
    evaluator: &mut dyn Evaluator,
) -> Result<TuneReport, TuneError> {
    if budget == 0 {
        return Err(TuneError::BadBudget);
    }
    let batch = random_batch(space, budget, derive_seed(seed, "sample"), None)?;
    let rows = run_evaluations(&batch, target_task, evaluator)?;
    Ok(TuneReport {
        strategy: Strategy::Random,
        target_task,
        budget,
        quantile: None,
        seed,
        saturated: batch.saturated,
        rows,
    })
}

fn run_evaluations(
    batch: &SampleBatch,
    target_task: f64,
    evaluator: &mut dyn Evaluator,
) -> Result<Vec<EvalRow>, TuneError> {
    let mut rows = Vec::with_capacity(batch.configs.len());
    let mut best: Option<f64> = None;
    let mut last_failure = String::new();
    for (i, config) in batch.configs.iter().enumerate() {
        let start = Instant::now();
        let outcome = evaluator.evaluate(config, target_task).and_then(|o| {
            if o.is_finite() {
                Ok(o)
            } else {
                Err(EvalFailure::new(format!("objective {o} is not finite")))
            }
        });
        let elapsed = start.elapsed();
        let (objective, failure) = match outcome {
            Ok(o) => {
                best = Some(best.map_or(o, |b: f64| b.min(o)));
                (Some(o), None)
            }
            Err(e) => {
                last_failure = e.message.clone();
                (None, Some(e.message))
            }
        };
        rows.push(EvalRow {
            index: i as u64 + 1,
            config: config.clone(),
            objective,
            failure,
            best_so_far: best,
            elapsed,
        });
    }
    if best.is_none() {
        return Err(TuneError::AllEvaluationsFailed { last: last_failure });
    }
    Ok(rows)
}

/// Wall-clock cost of producing a batch, with its rejection accounting.
#[derive(Debug, Clone)]
pub struct LatencyReport {
    pub elapsed: Duration,
    pub batch: SampleBatch,
}

/// Times a sampler producing `n` unique configurations.
pub fn latency_probe(
    n: u64,
    sampler: impl FnOnce(u64) -> Result<SampleBatch, CopulaError>,
) -> Result<LatencyReport, CopulaError> {
    let start = Instant::now();
    let batch = sampler(n)?;
    Ok(LatencyReport {
        elapsed: start.elapsed(),
        batch,
    })
}

/// Collects a source dataset the way a prior tuning campaign would: half the
/// budget explores uniformly, half runs a greedy perturbation search around
/// the incumbent, and every evaluation (accepted or not) is recorded.
pub fn collect_dataset(
    space: &Arc<ParameterSpace>,
    tasks: &[f64],
    evals_per_task: usize,
    seed: u64,
    evaluator: &mut dyn Evaluator,
) -> Result<Dataset, TuneError> {
    let counts: Vec<u64> = space.tunables().iter().map(|p| p.option_count()).collect();
    let mut records = Vec::with_capacity(tasks.len() * evals_per_task);
    for (ti, &task) in tasks.iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, &format!("collect-{ti}")));
        let mut incumbent: Option<(Vec<u64>, f64)> = None;
        for i in 0..evals_per_task {
            let indices: Vec<u64> = match (&incumbent, i < evals_per_task / 2) {
                (Some((best, _)), false) => perturb(best, &counts, &mut rng),
                _ => counts.iter().map(|&c| rng.random_range(0..c)).collect(),
            };
            let config = space.config_at(&indices);
            match evaluator.evaluate(&config, task) {
                Ok(objective) if objective.is_finite() => {
                    if incumbent.as_ref().is_none_or(|(_, b)| objective < *b) {
                        incumbent = Some((indices, objective));
                    }
                    records.push(TuningRecord {
                        config,
                        task_value: task,
                        objective,
                    });
                }
                // Failures leave no record; a prior campaign would retry.
                _ => {}
            }
        }
    }
    if records.is_empty() {
        return Err(TuneError::AllEvaluationsFailed {
            last: "no evaluation produced a finite objective".into(),
        });
    }
    Ok(Dataset::new(Arc::clone(space), records)?)
}

/// Steps a few option indices by up to three slots; always changes something.
fn perturb(base: &[u64], counts: &[u64], rng: &mut impl Rng) -> Vec<u64> {
    let mut out = base.to_vec();
    let mut changed = false;
    for (slot, &count) in out.iter_mut().zip(counts) {
        if rng.random::<f64>() < 0.35 {
            let step = rng.random_range(1..=3);
            let up = rng.random::<bool>();
            let moved = if up {
                (*slot + step).min(count - 1)
            } else {
                slot.saturating_sub(step)
            };
            if moved != *slot {
                *slot = moved;
                changed = true;
            }
        }
    }
    if !changed {
        let k = rng.random_range(0..out.len());
        out[k] = rng.random_range(0..counts[k]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn bowl_source(seed: u64) -> Dataset {
        let mut eval = SyntheticEvaluator::new(Landscape::ScaledBowl);
        collect_dataset(
            &Landscape::ScaledBowl.space(),
            &SOURCE_TASKS,
            200,
            seed,
            &mut eval,
        )
        .unwrap()
    }

    #[test]
    fn collect_dataset_shapes_per_task_counts() {
        let ds = bowl_source(1);
        assert_eq!(ds.len(), 600);
        for (_, count) in ds.task_groups() {
            assert_eq!(count, 200);
        }
    }

    #[test]
    fn tune_respects_budget_and_orders_rows() {
        let ds = bowl_source(2);
        let mut eval = SyntheticEvaluator::new(Landscape::ScaledBowl);
        let report = tune(&ds, 60.0, 10, 0.3, 7, &mut eval).unwrap();
        assert_eq!(report.rows.len(), 10);
        for (i, row) in report.rows.iter().enumerate() {
            assert_eq!(row.index, i as u64 + 1);
        }
    }

    #[test]
    fn tune_budget_one_yields_single_row() {
        let ds = bowl_source(3);
        let mut eval = SyntheticEvaluator::new(Landscape::ScaledBowl);
        let report = tune(&ds, 60.0, 1, 0.3, 7, &mut eval).unwrap();
        assert_eq!(report.rows.len(), 1);
    }

    #[test]
    fn tune_is_deterministic_per_seed() {
        let ds = bowl_source(4);
        let mut eval = SyntheticEvaluator::new(Landscape::ScaledBowl);
        let a = tune(&ds, 60.0, 8, 0.3, 42, &mut eval).unwrap();
        let b = tune(&ds, 60.0, 8, 0.3, 42, &mut eval).unwrap();
        // Wall time necessarily differs; everything else must not.
        assert_eq!(a.rows.len(), b.rows.len());
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.config, y.config);
            assert_eq!(x.objective, y.objective);
            assert_eq!(x.best_so_far, y.best_so_far);
        }
    }

    #[test]
    fn no_configuration_evaluated_twice() {
        let ds = bowl_source(5);
        let mut eval = SyntheticEvaluator::new(Landscape::ScaledBowl);
        let report = tune(&ds, 100.0, 30, 0.3, 11, &mut eval).unwrap();
        let distinct: HashSet<_> = report.rows.iter().map(|r| r.config.clone()).collect();
        assert_eq!(distinct.len(), report.rows.len());
    }

    #[test]
    fn best_so_far_is_monotone() {
        let ds = bowl_source(6);
        let mut eval = SyntheticEvaluator::new(Landscape::ScaledBowl);
        let report = tune(&ds, 60.0, 30, 0.3, 13, &mut eval).unwrap();
        let mut prev = f64::INFINITY;
        for row in &report.rows {
            let best = row.best_so_far.unwrap();
            assert!(best <= prev);
            prev = best;
        }
    }

    #[test]
    fn failed_evaluations_consume_budget_and_all_failed_errors() {
        let ds = bowl_source(7);
        let mut flaky = {
            let mut n = 0u64;
            move |config: &Configuration, task: f64| {
                n += 1;
                if n % 2 == 0 {
                    Err(EvalFailure::new("flaky"))
                } else {
                    Ok(Landscape::ScaledBowl.objective(config, task))
                }
            }
        };
        let report = tune(&ds, 60.0, 10, 0.3, 3, &mut flaky).unwrap();
        assert_eq!(report.rows.len(), 10);
        assert_eq!(
            report.rows.iter().filter(|r| r.failure.is_some()).count(),
            5
        );

        let mut broken = |_: &Configuration, _: f64| -> Result<f64, EvalFailure> {
            Err(EvalFailure::new("down"))
        };
        assert!(matches!(
            tune(&ds, 60.0, 4, 0.3, 3, &mut broken),
            Err(TuneError::AllEvaluationsFailed { .. })
        ));
    }

    #[test]
    fn tune_random_exhausts_tiny_spaces() {
        let space = Arc::new(
            ParameterSpace::new(
                vec![crate::space::ParameterDef {
                    name: "p".into(),
                    kind: crate::space::ParamKind::Integer { lo: 0, hi: 5 },
                }],
                crate::space::TaskFeature {
                    name: "size".into(),
                    kind: crate::space::TaskKind::Real { lo: 1.0, hi: 200.0 },
                },
            )
            .unwrap(),
        );
        let mut eval = |config: &Configuration, _: f64| Ok(config.values()[0].as_f64().unwrap());
        let report = tune_random(&space, 60.0, 6, 1, &mut eval).unwrap();
        assert_eq!(report.rows.len(), 6);
        // Budget >= |C| finds the exact optimum.
        assert_eq!(report.best_objective(), Some(0.0));
    }

    #[test]
    fn tune_rejects_zero_budget_and_single_task_sources() {
        let ds = bowl_source(8);
        let mut eval = SyntheticEvaluator::new(Landscape::ScaledBowl);
        assert!(matches!(
            tune(&ds, 60.0, 0, 0.3, 1, &mut eval),
            Err(TuneError::BadBudget)
        ));
        assert!(matches!(
            tune_random(&Landscape::ScaledBowl.space(), 60.0, 0, 1, &mut eval),
            Err(TuneError::BadBudget)
        ));

        let space = Landscape::ScaledBowl.space();
        let single = Dataset::new(
            Arc::clone(&space),
            ds.records()
                .iter()
                .filter(|r| r.task_value == SOURCE_TASKS[0])
                .cloned()
                .collect(),
        )
        .unwrap();
        assert!(matches!(
            tune(&single, 60.0, 5, 0.3, 1, &mut eval),
            Err(TuneError::SourceSpansOneTask)
        ));
    }

    #[test]
    fn speedup_is_baseline_over_best() {
        let ds = bowl_source(9);
        let mut eval = SyntheticEvaluator::new(Landscape::ScaledBowl);
        let report = tune(&ds, 60.0, 10, 0.3, 5, &mut eval).unwrap();
        let best = report.best_objective().unwrap();
        assert!((report.speedup(best).unwrap() - 1.0).abs() < 1e-12);
        assert!((report.speedup(10.0 * best).unwrap() - 10.0).abs() < 1e-9);

        let default =
            Landscape::ScaledBowl.objective(&Landscape::ScaledBowl.default_config(), 60.0);
        assert!(report.speedup(default).unwrap() > 1.0);
    }

    #[test]
    fn report_csv_is_deterministic_and_excludes_timing() {
        let ds = bowl_source(10);
        let space = Landscape::ScaledBowl.space();
        let mut eval = SyntheticEvaluator::new(Landscape::ScaledBowl);
        let mut render = |seed: u64| -> Vec<u8> {
            let report = tune(&ds, 60.0, 6, 0.3, seed, &mut eval).unwrap();
            let mut buf = Vec::new();
            report.write_csv(&space, &mut buf).unwrap();
            buf
        };
        assert_eq!(render(21), render(21));
        assert_ne!(render(21), render(22));
        let text = String::from_utf8(render(21)).unwrap();
        assert!(
            text.starts_with("evaluation,tile_x,tile_y,packed,size,objective,best_so_far,status")
        );
    }

    #[test]
    fn latency_probe_accounts_identity() {
        let space = Landscape::ScaledBowl.space();
        let probe = latency_probe(1, |n| random_batch(&space, n, 3, None)).unwrap();
        assert_eq!(probe.batch.configs.len(), 1);
        assert_eq!(
            probe.batch.generated,
            probe.batch.configs.len() as u64 + probe.batch.rejected_repeated
        );
    }

    #[test]
    fn derive_seed_separates_labels() {
        assert_ne!(derive_seed(1, "fit"), derive_seed(1, "sample"));
        assert_ne!(derive_seed(1, "fit"), derive_seed(2, "fit"));
        assert_eq!(derive_seed(1, "fit"), derive_seed(1, "fit"));
    }
}
