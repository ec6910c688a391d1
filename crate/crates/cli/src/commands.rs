use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value as Json};

use gctuner::budget::{min_budget, probability_curve, BudgetEstimate, BudgetInputs};
use gctuner::copula::{ConditionSpec, CopulaModel};
use gctuner::dataset::{Dataset, ANALYZE_QUANTILES};
use gctuner::space::ParameterSpace;
use gctuner::tuner::{
    collect_dataset, derive_seed, tune_random, tune_with_model, Evaluator, Landscape,
    ShellEvaluator, SyntheticEvaluator, TuneReport, SOURCE_TASKS, TARGET_TASKS,
};

use crate::{AnalyzeArgs, BudgetArgs, CliError, FitArgs, SampleArgs, SimulateArgs, TuneArgs};

fn ensure_out_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)?;
    Ok(())
}

/// Print to stdout without panicking when the reader has closed the pipe.
fn emit(text: &str) {
    use std::io::Write;
    std::io::stdout().lock().write_all(text.as_bytes()).ok();
}

fn write_json(path: &Path, value: &Json) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("json serialization");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Every run leaves a replay record: the command, every knob, the seed, and
/// the tool version.
fn write_metadata(out: &Path, command: &str, knobs: Json) -> Result<(), CliError> {
    let record = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "knobs": knobs,
    });
    write_json(&out.join("run_metadata.json"), &record)
}

fn check_quantile(q: f64) -> Result<(), CliError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(CliError::Usage(format!(
            "quantile must be in (0, 1], got {q}"
        )));
    }
    if q < gctuner::dataset::QUANTILE_FLOOR {
        eprintln!(
            "warning: quantile {q} is below the recommended floor of {}; \
             filtering this hard tends to over-specialize the model",
            gctuner::dataset::QUANTILE_FLOOR
        );
    }
    Ok(())
}

fn load_merged_datasets(
    space: &Arc<ParameterSpace>,
    paths: &[PathBuf],
) -> Result<Dataset, CliError> {
    let parts = paths
        .iter()
        .map(|p| Dataset::load_csv(p, Arc::clone(space)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset::concat(parts)?)
}

pub(crate) fn fit(args: FitArgs) -> Result<(), CliError> {
    check_quantile(args.quantile)?;
    ensure_out_dir(&args.out)?;
    let space = Arc::new(ParameterSpace::load(&args.space)?);
    let source = load_merged_datasets(&space, &args.data)?;
    let filtered = source.quantile_filter(args.quantile)?;
    let model = CopulaModel::fit_seeded(&filtered, Some(args.quantile), args.seed)?;
    model.save(args.out.join("model.json"))?;

    let reference = source.quantile_filter(0.10)?;
    let report = json!({
        "quantile": args.quantile,
        "kept": filtered.len(),
        "total": source.len(),
        "coverage": filtered.coverage(),
        "avg_marginal_kl": filtered.avg_marginal_kl(&reference)?,
        "warnings": model.warnings(),
    });
    write_json(&args.out.join("filter_report.json"), &report)?;
    write_metadata(
        &args.out,
        "fit",
        json!({
            "space": args.space,
            "data": args.data,
            "quantile": args.quantile,
            "seed": args.seed,
            "out": args.out,
        }),
    )?;
    println!(
        "fitted {} of {} records (quantile {}), model written to {}",
        filtered.len(),
        source.len(),
        args.quantile,
        args.out.join("model.json").display()
    );
    Ok(())
}

pub(crate) fn sample(args: SampleArgs) -> Result<(), CliError> {
    let model = CopulaModel::load(&args.model)?;
    let cond = ConditionSpec::new(model.space(), args.task)?;
    let batch = model.sample(Some(&cond), args.count, args.seed, None)?;

    let space = Arc::clone(model.space());
    let mut csv = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = space.tunables().iter().map(|p| p.name.clone()).collect();
    header.push(space.task_feature().name.clone());
    csv.write_record(&header)
        .map_err(|e| CliError::Data(e.to_string()))?;
    for config in &batch.configs {
        let mut row: Vec<String> = config.values().iter().map(|v| v.to_string()).collect();
        row.push(args.task.to_string());
        csv.write_record(&row)
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    let bytes = csv
        .into_inner()
        .map_err(|e| CliError::Data(e.to_string()))?;

    if batch.saturated {
        eprintln!(
            "warning: sampling saturated after {} attempts; the reduced space \
             may hold fewer than {} configurations",
            batch.generated, args.count
        );
    }
    eprintln!(
        "generated {} unique configurations ({} draws, {} repeats rejected)",
        batch.configs.len(),
        batch.generated,
        batch.rejected_repeated
    );
    match &args.out {
        Some(out) => {
            ensure_out_dir(out)?;
            fs::write(out.join("samples.csv"), &bytes)?;
            write_metadata(
                out,
                "sample",
                json!({
                    "model": args.model,
                    "task": args.task,
                    "count": args.count,
                    "seed": args.seed,
                    "out": out,
                    "generated": batch.generated,
                    "rejected_repeated": batch.rejected_repeated,
                    "saturated": batch.saturated,
                }),
            )?;
        }
        None => emit(&String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

pub(crate) fn budget(args: BudgetArgs) -> Result<(), CliError> {
    let (full, effective, estimated) = match (&args.full, &args.effective, &args.model) {
        (Some(full), Some(effective), None) => (*full, *effective, None),
        (None, None, Some(model_path)) => {
            let model = CopulaModel::load(model_path)?;
            let task = args.task.expect("clap enforces --task with --model");
            let cond = ConditionSpec::new(model.space(), task)?;
            let estimate = model.estimate_unique(
                Some(&cond),
                args.trials,
                derive_seed(args.seed, "support-estimate"),
            )?;
            let full = model.space().cardinality()?;
            let effective = (estimate.round() as u128).clamp(1, full);
            (full, effective, Some(estimate))
        }
        _ => {
            return Err(CliError::Usage(
                "provide either --full with --effective, or --model with --task".into(),
            ))
        }
    };

    let inputs = BudgetInputs {
        full_space: full,
        effective_space: effective,
        ideal_fraction: args.ideal_fraction,
        pruned_optimal_allowance: args.allowance,
        confidence: args.confidence,
        max_budget: args.max_budget,
    };
    let estimate = min_budget(&inputs)?;
    let ideal = gctuner::budget::ideal_count(&inputs);
    let curve = probability_curve(&inputs);

    let mut report = String::new();
    report.push_str(&format!("full_space: {full}\n"));
    report.push_str(&format!("effective_space: {effective}\n"));
    if let Some(raw) = estimated {
        report.push_str(&format!("support_estimate: {raw:.1}\n"));
    }
    report.push_str(&format!(
        "reduction_ratio: {:.6}\n",
        effective as f64 / full as f64
    ));
    report.push_str(&format!("ideal_count: {ideal}\n"));
    match &estimate {
        BudgetEstimate::Defined {
            k_star,
            probability_at_k,
            exceeds_max_budget,
            ..
        } => {
            report.push_str(&format!("budget: {k_star}\n"));
            report.push_str(&format!("probability_at_budget: {probability_at_k:.6}\n"));
            if *exceeds_max_budget {
                report.push_str(&format!(
                    "note: budget exceeds the {}-evaluation cap\n",
                    args.max_budget
                ));
            }
        }
        BudgetEstimate::Undefined { reason } => {
            report.push_str("budget: undefined\n");
            report.push_str(&format!("reason: {reason}\n"));
        }
    }
    let mut curve_text = String::from("k,probability\n");
    for (k, p) in &curve {
        curve_text.push_str(&format!("{k},{p}\n"));
    }

    if let Some(out) = &args.out {
        ensure_out_dir(out)?;
        write_json(
            &out.join("budget.json"),
            &json!({
                "inputs": inputs,
                "ideal_count": ideal.to_string(),
                "estimate": estimate,
                "support_estimate": estimated,
            }),
        )?;
        fs::write(out.join("curve.csv"), &curve_text)?;
        write_metadata(
            out,
            "budget",
            json!({
                "full": args.full.map(|v| v.to_string()),
                "effective": args.effective.map(|v| v.to_string()),
                "model": args.model,
                "task": args.task,
                "trials": args.trials,
                "ideal_fraction": args.ideal_fraction,
                "allowance": args.allowance,
                "confidence": args.confidence,
                "max_budget": args.max_budget,
                "seed": args.seed,
            }),
        )?;
    }
    emit(&report);
    emit(&curve_text);
    Ok(())
}

enum EvaluatorSpec {
    Synthetic(Landscape),
    Shell { template: String },
}

fn parse_evaluator(spec: &str) -> Result<EvaluatorSpec, CliError> {
    match spec.split_once(':') {
        Some(("synthetic", name)) => {
            let landscape = Landscape::by_name(name).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown landscape `{name}`; available: {}",
                    Landscape::ALL.map(|l| l.name()).join(", ")
                ))
            })?;
            Ok(EvaluatorSpec::Synthetic(landscape))
        }
        Some(("shell", template)) if !template.is_empty() => Ok(EvaluatorSpec::Shell {
            template: template.to_string(),
        }),
        _ => Err(CliError::Usage(
            "evaluator must be `synthetic:<landscape>` or `shell:<command template>`".into(),
        )),
    }
}

pub(crate) fn tune(args: TuneArgs) -> Result<(), CliError> {
    check_quantile(args.quantile)?;
    ensure_out_dir(&args.out)?;

    // Resolve the model: pre-fitted, or fit from source data now.
    let model = match (&args.model, &args.space) {
        (Some(path), None) => CopulaModel::load(path)?,
        (None, Some(space_path)) => {
            if args.data.is_empty() {
                return Err(CliError::Usage("--space requires --data".into()));
            }
            let space = Arc::new(ParameterSpace::load(space_path)?);
            let source = load_merged_datasets(&space, &args.data)?;
            if source.task_groups().len() < 2 {
                return Err(CliError::from(
                    gctuner::tuner::TuneError::SourceSpansOneTask,
                ));
            }
            let filtered = source.quantile_filter(args.quantile)?;
            CopulaModel::fit_seeded(
                &filtered,
                Some(args.quantile),
                derive_seed(args.seed, "fit"),
            )?
        }
        _ => {
            return Err(CliError::Usage(
                "provide either --model, or --space with --data".into(),
            ))
        }
    };
    let space = Arc::clone(model.space());

    let mut evaluator: Box<dyn Evaluator> = match parse_evaluator(&args.evaluator)? {
        EvaluatorSpec::Synthetic(landscape) => {
            if landscape.space().fingerprint() != space.fingerprint() {
                return Err(CliError::Data(format!(
                    "model schema does not match the `{}` landscape schema",
                    landscape.name()
                )));
            }
            Box::new(SyntheticEvaluator::new(landscape))
        }
        EvaluatorSpec::Shell { template } => {
            let pattern = args.objective_pattern.as_deref().ok_or_else(|| {
                CliError::Usage("shell evaluators require --objective-pattern".into())
            })?;
            Box::new(ShellEvaluator::new(
                Arc::clone(&space),
                template,
                pattern,
                Duration::from_secs(args.timeout_secs),
                args.repeats,
            )?)
        }
    };

    // Budget: explicit count, or the model's own prediction with `auto`.
    let mut budget_note = Json::Null;
    let budget = match args.budget.as_str() {
        "auto" => {
            let cond = ConditionSpec::new(&space, args.task)?;
            let estimate = model.estimate_unique(
                Some(&cond),
                10_000,
                derive_seed(args.seed, "support-estimate"),
            )?;
            let full = space.cardinality()?;
            let effective = (estimate.round() as u128).clamp(1, full);
            let inputs = BudgetInputs::new(full, effective);
            match min_budget(&inputs)? {
                BudgetEstimate::Defined {
                    k_star,
                    exceeds_max_budget,
                    ..
                } => {
                    let capped = k_star.min(inputs.max_budget);
                    if exceeds_max_budget {
                        eprintln!(
                            "warning: predicted budget {k_star} exceeds the cap; using {capped}"
                        );
                    }
                    budget_note = json!({
                        "predicted": k_star,
                        "effective_space": effective.to_string(),
                        "capped_to": capped,
                    });
                    capped
                }
                BudgetEstimate::Undefined { reason } => {
                    eprintln!(
                        "warning: budget undefined ({reason}); falling back to {}",
                        inputs.max_budget
                    );
                    budget_note = json!({
                        "undefined_reason": reason.to_string(),
                        "fallback": inputs.max_budget,
                    });
                    inputs.max_budget
                }
            }
        }
        text => text.parse::<u64>().map_err(|_| {
            CliError::Usage(format!("budget must be a count or `auto`, got `{text}`"))
        })?,
    };

    let report = tune_with_model(&model, args.task, budget, args.seed, evaluator.as_mut())?;
    let csv_path = args.out.join("tune.csv");
    let mut buf = Vec::new();
    report.write_csv(&space, &mut buf)?;
    fs::write(&csv_path, &buf)?;
    write_json(
        &args.out.join("summary.json"),
        &summary_json(&report, &space),
    )?;
    write_metadata(
        &args.out,
        "tune",
        json!({
            "space": args.space,
            "data": args.data,
            "model": args.model,
            "task": args.task,
            "budget": args.budget,
            "resolved_budget": budget,
            "budget_note": budget_note,
            "evaluator": args.evaluator,
            "objective_pattern": args.objective_pattern,
            "timeout_secs": args.timeout_secs,
            "repeats": args.repeats,
            "quantile": args.quantile,
            "seed": args.seed,
            "out": args.out,
        }),
    )?;
    match report.best_objective() {
        Some(best) => println!(
            "evaluated {} configurations; best objective {best} at evaluation {}",
            report.rows.len(),
            report.best_row().map(|r| r.index).unwrap_or(0),
        ),
        None => println!(
            "evaluated {} configurations; none succeeded",
            report.rows.len()
        ),
    }
    Ok(())
}

fn summary_json(report: &TuneReport, space: &ParameterSpace) -> Json {
    let best_config: Option<BTreeMap<String, String>> = report.best_config().map(|c| {
        c.iter_named(space)
            .map(|(n, v)| (n.to_string(), v.to_string()))
            .collect()
    });
    json!({
        "strategy": report.strategy.name(),
        "target_task": report.target_task,
        "budget": report.budget,
        "quantile": report.quantile,
        "seed": report.seed,
        "saturated": report.saturated,
        "evaluations": report.rows.len(),
        "failures": report.rows.iter().filter(|r| r.failure.is_some()).count(),
        "best_objective": report.best_objective(),
        "best_evaluation": report.best_row().map(|r| r.index),
        "best_config": best_config,
        "total_eval_seconds": report
            .rows
            .iter()
            .map(|r| r.elapsed.as_secs_f64())
            .sum::<f64>(),
    })
}

fn write_dataset_csv(ds: &Dataset, path: &Path) -> Result<(), CliError> {
    let space = ds.space();
    let mut csv = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = space.tunables().iter().map(|p| p.name.clone()).collect();
    header.push(space.task_feature().name.clone());
    header.push("objective".into());
    csv.write_record(&header)
        .map_err(|e| CliError::Data(e.to_string()))?;
    for r in ds.records() {
        let mut row: Vec<String> = r.config.values().iter().map(|v| v.to_string()).collect();
        row.push(r.task_value.to_string());
        row.push(r.objective.to_string());
        csv.write_record(&row)
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    let bytes = csv
        .into_inner()
        .map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let space = Arc::new(ParameterSpace::load(&args.space)?);
    let data = load_merged_datasets(&space, &args.data)?;
    let reference = match &args.reference {
        Some(path) => Dataset::load_csv(path, Arc::clone(&space))?,
        None => data.quantile_filter(0.10)?,
    };
    let reports = data.analyze_quantiles(&reference, &ANALYZE_QUANTILES)?;

    let mut text = String::from("quantile,kept,coverage,avg_marginal_kl\n");
    for r in &reports {
        text.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.quantile, r.kept, r.coverage, r.avg_marginal_kl
        ));
    }
    if let Some(out) = &args.out {
        ensure_out_dir(out)?;
        fs::write(out.join("analyze.csv"), &text)?;
        write_metadata(
            out,
            "analyze",
            json!({
                "space": args.space,
                "data": args.data,
                "reference": args.reference,
            }),
        )?;
    }
    emit(&text);
    Ok(())
}

pub(crate) fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    check_quantile(args.quantile)?;
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let landscape = Landscape::by_name(&args.landscape).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown landscape `{}`; available: {}",
            args.landscape,
            Landscape::ALL.map(|l| l.name()).join(", ")
        ))
    })?;
    ensure_out_dir(&args.out)?;
    let space = landscape.space();
    space.save(args.out.join("space.toml"))?;

    struct SeedOutcome {
        first_speedup: f64,
        budget_speedup: f64,
        best_speedup: f64,
        best_at: u64,
        predicted_budget: Option<u64>,
    }
    let mut aggregate: BTreeMap<(String, &'static str), Vec<SeedOutcome>> = BTreeMap::new();

    for seed in 0..args.seeds {
        let mut evaluator = SyntheticEvaluator::new(landscape);
        let source = collect_dataset(
            &space,
            &SOURCE_TASKS,
            args.source_evals,
            seed,
            &mut evaluator,
        )?;
        write_dataset_csv(&source, &args.out.join(format!("source_seed{seed}.csv")))?;
        let filtered = source.quantile_filter(args.quantile)?;
        let model =
            CopulaModel::fit_seeded(&filtered, Some(args.quantile), derive_seed(seed, "fit"))?;

        for (target_name, target) in TARGET_TASKS {
            let baseline = landscape.objective(&landscape.default_config(), target);

            let cond = ConditionSpec::new(&space, target)?;
            let support = model.estimate_unique(
                Some(&cond),
                10_000,
                derive_seed(seed, "support-estimate"),
            )?;
            let full = space.cardinality()?;
            let inputs = BudgetInputs::new(full, (support.round() as u128).clamp(1, full));
            let predicted = match min_budget(&inputs)? {
                BudgetEstimate::Defined { k_star, .. } => Some(k_star.min(args.budget)),
                BudgetEstimate::Undefined { .. } => None,
            };

            let gc = tune_with_model(&model, target, args.budget, seed, &mut evaluator)?;
            let random = tune_random(&space, target, args.budget, seed, &mut evaluator)?;

            for report in [&gc, &random] {
                let name = format!("{target_name}_seed{seed}_{}.csv", report.strategy.name());
                let mut buf = Vec::new();
                report.write_csv(&space, &mut buf)?;
                fs::write(args.out.join(name), &buf)?;

                let cutoff = match report.strategy {
                    gctuner::Strategy::Copula => predicted.unwrap_or(args.budget),
                    gctuner::Strategy::Random => args.budget,
                };
                let best_within = |k: u64| -> f64 {
                    report
                        .rows
                        .iter()
                        .take(k as usize)
                        .filter_map(|r| r.objective)
                        .fold(f64::INFINITY, f64::min)
                };
                let best_row = report.best_row().expect("synthetic evaluations succeed");
                aggregate
                    .entry((target_name.to_string(), report.strategy.name()))
                    .or_default()
                    .push(SeedOutcome {
                        first_speedup: baseline / report.rows[0].objective.unwrap(),
                        budget_speedup: baseline / best_within(cutoff),
                        best_speedup: baseline / best_row.objective.unwrap(),
                        best_at: best_row.index,
                        predicted_budget: match report.strategy {
                            gctuner::Strategy::Copula => predicted,
                            gctuner::Strategy::Random => None,
                        },
                    });
            }
        }
    }

    let mut table = String::from(
        "target,strategy,seeds,predicted_budget,first_speedup,budget_speedup,best_speedup,best_at\n",
    );
    for ((target, strategy), outcomes) in &aggregate {
        let n = outcomes.len() as f64;
        let mean =
            |f: &dyn Fn(&SeedOutcome) -> f64| -> f64 { outcomes.iter().map(f).sum::<f64>() / n };
        let predicted = outcomes
            .iter()
            .filter_map(|o| o.predicted_budget)
            .collect::<Vec<_>>();
        let predicted_text = if predicted.is_empty() {
            "--".to_string()
        } else {
            format!(
                "{:.1}",
                predicted.iter().sum::<u64>() as f64 / predicted.len() as f64
            )
        };
        table.push_str(&format!(
            "{target},{strategy},{},{predicted_text},{:.4},{:.4},{:.4},{:.1}\n",
            outcomes.len(),
            mean(&|o| o.first_speedup),
            mean(&|o| o.budget_speedup),
            mean(&|o| o.best_speedup),
            mean(&|o| o.best_at as f64),
        ));
    }
    fs::write(args.out.join("aggregate.csv"), &table)?;
    write_metadata(
        &args.out,
        "simulate",
        json!({
            "landscape": args.landscape,
            "seeds": args.seeds,
            "budget": args.budget,
            "quantile": args.quantile,
            "source_evals": args.source_evals,
            "source_tasks": SOURCE_TASKS,
            "targets": TARGET_TASKS,
            "out": args.out,
        }),
    )?;
    emit(&table);
    Ok(())
}
