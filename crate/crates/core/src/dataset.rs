//! Prior tuning data: CSV ingestion, performance-quantile filtering, and the
//! coverage / marginal-divergence analyses that guide how aggressively to
//! filter before fitting.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::space::{Configuration, ParameterSpace, ValidateError};

/// Additive smoothing applied per option when forming empirical marginals.
const KL_SMOOTHING: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{name}` in header")]
    MissingColumn { name: String },
    #[error("row {row}, column `{column}`: {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },
    #[error("row {row}: {source}")]
    Validation { row: usize, source: ValidateError },
    #[error("dataset is empty")]
    Empty,
    #[error("quantile must be in (0, 1], got {0}")]
    BadQuantile(f64),
    #[error("datasets belong to different spaces")]
    SpaceMismatch,
}

/// One empirical evaluation: a configuration, the task it ran on, and the
/// measured objective (lower is better; seconds of runtime by convention).
#[derive(Debug, Clone, PartialEq)]
pub struct TuningRecord {
    pub config: Configuration,
    pub task_value: f64,
    pub objective: f64,
}

/// An ordered collection of tuning records over one space, possibly spanning
/// several tasks. Immutable after load; all operations are pure.
#[derive(Debug, Clone)]
pub struct Dataset {
    space: Arc<ParameterSpace>,
    records: Vec<TuningRecord>,
}

/// Summary of one quantile-filtering pass.
#[derive(Debug, Clone, Serialize)]
pub struct FilterReport {
    pub quantile: f64,
    pub kept: usize,
    pub coverage: f64,
    pub avg_marginal_kl: f64,
}

impl Dataset {
    pub fn new(space: Arc<ParameterSpace>, records: Vec<TuningRecord>) -> Result<Self, DataError> {
        for (i, r) in records.iter().enumerate() {
            let row = i + 1;
            if !space.contains(&r.config) {
                return Err(DataError::Cell {
                    row,
                    column: "<configuration>".into(),
                    message: "configuration does not belong to the space".into(),
                });
            }
            if !r.objective.is_finite() {
                return Err(DataError::Cell {
                    row,
                    column: "objective".into(),
                    message: format!("objective must be finite, got {}", r.objective),
                });
            }
            if !space.task_feature().accepts_record_value(r.task_value) {
                return Err(DataError::Cell {
                    row,
                    column: space.task_feature().name.clone(),
                    message: format!("task value {} outside the task domain", r.task_value),
                });
            }
        }
        Ok(Self { space, records })
    }

    /// Loads a dataset from CSV. The header must name every tunable, the task
    /// feature, and `objective`; extra columns are ignored.
    pub fn load_csv(path: impl AsRef<Path>, space: Arc<ParameterSpace>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv_reader(file, space)
    }

    pub fn from_csv_reader(
        reader: impl std::io::Read,
        space: Arc<ParameterSpace>,
    ) -> Result<Self, DataError> {
        let mut csv = csv::Reader::from_reader(reader);
        let headers = csv.headers()?.clone();
        let col = |name: &str| -> Result<usize, DataError> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::MissingColumn { name: name.into() })
        };
        let param_cols: Vec<usize> = space
            .tunables()
            .iter()
            .map(|p| col(&p.name))
            .collect::<Result<_, _>>()?;
        let task_col = col(&space.task_feature().name)?;
        let obj_col = col("objective")?;

        let mut records = Vec::new();
        // Row numbers are file line numbers: the header is row 1.
        for (i, row) in csv.records().enumerate() {
            let row_no = i + 2;
            let row = row?;
            let fields: Vec<(&str, &str)> = space
                .tunables()
                .iter()
                .zip(&param_cols)
                .map(|(p, &c)| (p.name.as_str(), row.get(c).unwrap_or("")))
                .collect();
            let config = space
                .validate(&fields)
                .map_err(|source| DataError::Validation {
                    row: row_no,
                    source,
                })?;
            let task_raw = row.get(task_col).unwrap_or("");
            let task_value: f64 = task_raw.parse().map_err(|_| DataError::Cell {
                row: row_no,
                column: space.task_feature().name.clone(),
                message: format!("expected a number, got `{task_raw}`"),
            })?;
            if !space.task_feature().accepts_record_value(task_value) {
                return Err(DataError::Cell {
                    row: row_no,
                    column: space.task_feature().name.clone(),
                    message: format!("task value {task_value} outside the task domain"),
                });
            }
            let obj_raw = row.get(obj_col).unwrap_or("");
            let objective: f64 = obj_raw.parse().map_err(|_| DataError::Cell {
                row: row_no,
                column: "objective".into(),
                message: format!("expected a number, got `{obj_raw}`"),
            })?;
            if !objective.is_finite() {
                return Err(DataError::Cell {
                    row: row_no,
                    column: "objective".into(),
                    message: "objective must be finite".into(),
                });
            }
            records.push(TuningRecord {
                config,
                task_value,
                objective,
            });
        }
        Ok(Self { space, records })
    }

    /// Concatenates datasets over the same space, preserving order.
    pub fn concat(parts: Vec<Dataset>) -> Result<Self, DataError> {
        let mut iter = parts.into_iter();
        let mut first = iter.next().ok_or(DataError::Empty)?;
        for part in iter {
            if part.space.fingerprint() != first.space.fingerprint() {
                return Err(DataError::SpaceMismatch);
            }
            first.records.extend(part.records);
        }
        Ok(first)
    }

    pub fn space(&self) -> &Arc<ParameterSpace> {
        &self.space
    }

    pub fn records(&self) -> &[TuningRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct task values in first-seen order, with record counts.
    pub fn task_groups(&self) -> Vec<(f64, usize)> {
        let mut order: Vec<u64> = Vec::new();
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for r in &self.records {
            let key = r.task_value.to_bits();
            if !counts.contains_key(&key) {
                order.push(key);
            }
            *counts.entry(key).or_insert(0) += 1;
        }
        order
            .into_iter()
            .map(|k| (f64::from_bits(k), counts[&k]))
            .collect()
    }

    /// Keeps, per task independently, the ceil(q * n_task) records with the
    /// smallest objective. Ties break by original order and the output
    /// preserves input order.
    pub fn quantile_filter(&self, q: f64) -> Result<Dataset, DataError> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(DataError::BadQuantile(q));
        }
        if self.records.is_empty() {
            return Err(DataError::Empty);
        }
        let mut by_task: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            by_task.entry(r.task_value.to_bits()).or_default().push(i);
        }
        let mut keep = vec![false; self.records.len()];
        for indices in by_task.values() {
            let mut ranked = indices.clone();
            //

            // Stable sort on objective keeps original order among ties.
            ranked.sort_by(|&a, &b| {
                self.records[a]
                    .objective
                    .partial_cmp(&self.records[b].objective)
                    .expect("objectives are finite")
            });
            let kept = (q * indices.len() as f64).ceil() as usize;
            for &i in ranked.iter().take(kept.min(indices.len())) {
                keep[i] = true;
            }
        }
        let records = self
            .records
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(r, _)| r.clone())
            .collect();
        Ok(Dataset {
            space: Arc::clone(&self.space),
            records,
        })
    }

    /// Fraction of the full product space reachable from the observed
    /// marginal support: the product over tunables of
    /// (distinct observed values) / (total options).
    pub fn coverage(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let mut product = 1.0;
        for (idx, p) in self.space.tunables().iter().enumerate() {
            let distinct: HashSet<u64> = self
                .records
                .iter()
                .filter_map(|r| p.option_index(&r.config.values()[idx]))
                .collect();
            product *= distinct.len() as f64 / p.option_count() as f64;
        }
        product
    }

    /// Mean over tunables of KL(P || Q) in nats, where P is this dataset's
    /// per-parameter empirical distribution and Q the reference's, both over
    /// the full option list with additive smoothing then renormalization.
    pub fn avg_marginal_kl(&self, reference: &Dataset) -> Result<f64, DataError> {
        if self.records.is_empty() || reference.records.is_empty() {
            return Err(DataError::Empty);
        }
        if self.space.fingerprint() != reference.space.fingerprint() {
            return Err(DataError::SpaceMismatch);
        }
        let mut total = 0.0;
        for (idx, p) in self.space.tunables().iter().enumerate() {
            let count_options = |ds: &Dataset| -> HashMap<u64, f64> {
                let mut counts = HashMap::new();
                for r in &ds.records {
                    let oi = p
                        .option_index(&r.config.values()[idx])
                        .expect("records validate against the space");
                    *counts.entry(oi).or_insert(0.0) += 1.0;
                }
                counts
            };
            let p_counts = count_options(self);
            let q_counts = count_options(reference);
            let m = p.option_count() as f64;
            let p_total = self.records.len() as f64 + m * KL_SMOOTHING;
            let q_total = reference.records.len() as f64 + m * KL_SMOOTHING;

            let observed: HashSet<u64> = p_counts.keys().chain(q_counts.keys()).copied().collect();
            let mut kl = 0.0;
            for &oi in &observed {
                let pi = (p_counts.get(&oi).copied().unwrap_or(0.0) + KL_SMOOTHING) / p_total;
                let qi = (q_counts.get(&oi).copied().unwrap_or(0.0) + KL_SMOOTHING) / q_total;
                kl += pi * (pi / qi).ln();
            }
            // Options observed in neither dataset share one closed-form term.
            let unobserved = m - observed.len() as f64;
            if unobserved > 0.0 {
                let pi = KL_SMOOTHING / p_total;
                kl += unobserved * pi * (q_total / p_total).ln();
            }
            total += kl;
        }
        Ok(total / self.space.tunables().len() as f64)
    }

    /// Full quantile-sweep analysis: for each quantile, filter and report
    /// kept count, coverage, and divergence from `reference`.
    pub fn analyze_quantiles(
        &self,
        reference: &Dataset,
        quantiles: &[f64],
    ) -> Result<Vec<FilterReport>, DataError> {
        quantiles
            .iter()
            .map(|&q| {
                let filtered = self.quantile_filter(q)?;
                Ok(FilterReport {
                    quantile: q,
                    kept: filtered.len(),
                    coverage: filtered.coverage(),
                    avg_marginal_kl: filtered.avg_marginal_kl(reference)?,
                })
            })
            .collect()
    }
}

/// The analyze command's fixed quantile grid, from full data down to the
/// top decile.
pub const ANALYZE_QUANTILES: [f64; 10] = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1];

/// Default filtering quantile: keep the top 30% of each source task.
pub const DEFAULT_QUANTILE: f64 = 0.30;

/// Documented floor below which filtering over-specifies the model.
pub const QUANTILE_FLOOR: f64 = 0.15;
