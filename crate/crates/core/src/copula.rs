//! The joint model: a Gaussian copula over per-column latents.
//!
//! Fitting encodes every record into standard-normal latents (stochastic
//! placement inside categorical intervals, so repeated categories do not
//! collapse to a point), computes the Pearson correlation of the latent
//! columns, and repairs it to a positive-semidefinite correlation matrix.
//! Generation conditions the latent Gaussian on the task feature via the
//! Schur complement, draws latent vectors, and decodes them back through the
//! marginal inverses with duplicate rejection.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::marginals::{
    CategoricalMarginal, MarginalError, MarginalTransform, NumericMarginal, Rounding, TransformKind,
};
use crate::space::{Configuration, ParamKind, ParameterSpace, TaskKind, Value};

/// Variance below which the conditioned column is treated as carrying no
/// information.
const CONDITION_VARIANCE_FLOOR: f64 = 1e-12;

/// Latent columns with standard deviation below this are constant; their
/// correlations are undefined and set to zero.
const CONSTANT_LATENT_STD: f64 = 1e-12;

/// Attempt budget multiplier: sampling gives up after `100 * n` draws.
pub const ATTEMPT_CAP_FACTOR: u64 = 100;

const MODEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CopulaError {
    #[error("cannot fit a copula to {found} record(s); at least 2 are required")]
    TooFewRecords { found: usize },
    #[error(transparent)]
    Marginal(#[from] MarginalError),
    #[error("condition value {value} outside the task domain [{lo}, {hi}]")]
    ConditionOutOfDomain { value: f64, lo: f64, hi: f64 },
    #[error("sample count must be at least 1")]
    BadSampleCount,
    #[error("support estimation needs at least 1000 trials, got {found}")]
    TooFewTrials { found: u64 },
    #[error("failed to access model file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("model file error: {0}")]
    Format(String),
}

/// Non-fatal conditions observed while fitting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitWarning {
    /// All records share one task value; conditioning on other tasks is pure
    /// extrapolation.
    SingleTaskValue,
    /// A column held a single distinct value; its marginal fell back to the
    /// std-floor / smoothing rules.
    DegenerateColumn { column: String },
}

/// A conditioning constraint: fix the task feature to `value` during
/// generation. The value may lie outside all observed task values, but must
/// stay inside the schema's task domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSpec {
    pub column: String,
    pub value: f64,
}

impl ConditionSpec {
    pub fn new(space: &ParameterSpace, value: f64) -> Result<Self, CopulaError> {
        let task = space.task_feature();
        if !task.contains(value) {
            let (lo, hi) = task.bounds();
            return Err(CopulaError::ConditionOutOfDomain { value, lo, hi });
        }
        Ok(Self {
            column: task.name.clone(),
            value,
        })
    }
}

/// The latent Gaussian over non-conditioned columns after fixing the task
/// feature.
#[derive(Debug, Clone)]
pub struct ConditionalGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Set when the conditioned column had (near-)zero variance and was
    /// treated as independent of the rest.
    pub condition_independent: bool,
}

/// A batch of generated configurations with rejection accounting.
///
/// `generated == configs.len() + rejected_repeated` always holds; `saturated`
/// is set when the attempt cap was reached before `n` unique configurations
/// were found, which signals that the reduced space may hold fewer than `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub configs: Vec<Configuration>,
    pub generated: u64,
    pub rejected_repeated: u64,
    pub saturated: bool,
}

/// Fitted marginal transforms plus the latent correlation matrix.
///
/// Column order matches the schema: tunables in schema order, then the task
/// feature last. Immutable after fit and safe to share across threads;
/// sampling takes per-call RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct CopulaModel {
    space: Arc<ParameterSpace>,
    transforms: Vec<MarginalTransform>,
    corr: DMatrix<f64>,
    fitted_rows: usize,
    quantile: Option<f64>,
    warnings: Vec<FitWarning>,
}

impl CopulaModel {
    /// Fits marginals and the latent correlation to a (typically
    /// quantile-filtered) dataset. Categorical encoding is stochastic, so the
    /// caller provides the RNG stream.
    pub fn fit(ds: &Dataset, rng: &mut impl Rng) -> Result<Self, CopulaError> {
        Self::fit_tagged(ds, None, rng)
    }

    /// Like [`CopulaModel::fit`], recording the filtering quantile that
    /// produced `ds` as model metadata.
    pub fn fit_tagged(
        ds: &Dataset,
        quantile: Option<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self, CopulaError> {
        let n = ds.len();
        if n < 2 {
            return Err(CopulaError::TooFewRecords { found: n });
        }
        let space = Arc::clone(ds.space());
        let mut warnings = Vec::new();
        if ds.task_groups().len() < 2 {
            warnings.push(FitWarning::SingleTaskValue);
        }

        let mut transforms = Vec::with_capacity(space.tunables().len() + 1);
        for (idx, p) in space.tunables().iter().enumerate() {
            let kind = match &p.kind {
                ParamKind::Integer { lo, hi } => {
                    let values: Vec<f64> = ds
                        .records()
                        .iter()
                        .map(|r| r.config.values()[idx].as_f64().unwrap())
                        .collect();
                    if all_equal(&values) {
                        warnings.push(FitWarning::DegenerateColumn {
                            column: p.name.clone(),
                        });
                    }
                    TransformKind::Numeric(NumericMarginal::fit(
                        &p.name,
                        &values,
                        *lo as f64,
                        *hi as f64,
                        Rounding::Integer,
                    )?)
                }
                ParamKind::Real { lo, hi, grid } => {
                    let values: Vec<f64> = ds
                        .records()
                        .iter()
                        .map(|r| r.config.values()[idx].as_f64().unwrap())
                        .collect();
                    if all_equal(&values) {
                        warnings.push(FitWarning::DegenerateColumn {
                            column: p.name.clone(),
                        });
                    }
                    TransformKind::Numeric(NumericMarginal::fit(
                        &p.name,
                        &values,
                        *lo,
                        *hi,
                        Rounding::Grid { count: *grid },
                    )?)
                }
                ParamKind::Categorical { values: options } => {
                    let observed: Vec<&str> = ds
                        .records()
                        .iter()
                        .map(|r| match &r.config.values()[idx] {
                            Value::Cat(c) => c.as_str(),
                            _ => unreachable!("records validate against the space"),
                        })
                        .collect();
                    if observed.iter().collect::<HashSet<_>>().len() == 1 {
                        warnings.push(FitWarning::DegenerateColumn {
                            column: p.name.clone(),
                        });
                    }
                    TransformKind::Categorical(CategoricalMarginal::fit(&observed, options))
                }
            };
            transforms.push(MarginalTransform {
                column: p.name.clone(),
                kind,
            });
        }

        let task = space.task_feature();
        let task_values: Vec<f64> = ds.records().iter().map(|r| r.task_value).collect();
        let (task_lo, task_hi) = task.bounds();
        let task_rounding = match task.kind {
            TaskKind::Integer { .. } => Rounding::Integer,
            TaskKind::Real { .. } => Rounding::None,
        };
        transforms.push(MarginalTransform {
            column: task.name.clone(),
            kind: TransformKind::Numeric(NumericMarginal::fit(
                &task.name,
                &task_values,
                task_lo,
                task_hi,
                task_rounding,
            )?),
        });

        let d = transforms.len();
        let mut latents = DMatrix::zeros(n, d);
        for (ri, rec) in ds.records().iter().enumerate() {
            for (ci, t) in transforms.iter().take(d - 1).enumerate() {
                latents[(ri, ci)] = t.forward_stochastic(&rec.config.values()[ci], rng)?;
            }
            latents[(ri, d - 1)] = transforms[d - 1].forward_f64(rec.task_value)?;
        }

        let corr = repair_correlation(pearson_correlation(&latents));

        Ok(Self {
            space,
            transforms,
            corr,
            fitted_rows: n,
            quantile,
            warnings,
        })
    }

    /// Convenience: fit with a fresh deterministic RNG stream.
    pub fn fit_seeded(ds: &Dataset, quantile: Option<f64>, seed: u64) -> Result<Self, CopulaError> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Self::fit_tagged(ds, quantile, &mut rng)
    }

    pub fn space(&self) -> &Arc<ParameterSpace> {
        &self.space
    }

    pub fn transforms(&self) -> &[MarginalTransform] {
        &self.transforms
    }

    pub fn correlation(&self) -> &DMatrix<f64> {
        &self.corr
    }

    pub fn fitted_rows(&self) -> usize {
        self.fitted_rows
    }

    pub fn quantile(&self) -> Option<f64> {
        self.quantile
    }

    pub fn warnings(&self) -> &[FitWarning] {
        &self.warnings
    }

    /// Latent distribution of the tunable columns given the task value:
    /// mean `Σ_uc Σ_cc⁻¹ z_c` and Schur complement `Σ_uu − Σ_uc Σ_cc⁻¹ Σ_cu`.
    pub fn conditional_latent(
        &self,
        cond: &ConditionSpec,
    ) -> Result<ConditionalGaussian, CopulaError> {
        let z_c = self.transforms.last().unwrap().forward_f64(cond.value)?;
        Ok(condition_gaussian(&self.corr, self.corr.ncols() - 1, z_c))
    }

    /// Generates up to `n` unique configurations conditioned on the task
    /// value (or from the unconditioned joint when `cond` is `None`).
    /// Duplicates within the batch and against `exclude` are rejected;
    /// deterministic given the seed.
    pub fn sample(
        &self,
        cond: Option<&ConditionSpec>,
        n: u64,
        seed: u64,
        exclude: Option<&HashSet<Configuration>>,
    ) -> Result<SampleBatch, CopulaError> {
        if n == 0 {
            return Err(CopulaError::BadSampleCount);
        }
        let drawer = self.latent_drawer(cond)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let cap = n.saturating_mul(ATTEMPT_CAP_FACTOR);
        let mut batch = SampleBatch {
            configs: Vec::with_capacity(n as usize),
            generated: 0,
            rejected_repeated: 0,
            saturated: false,
        };
        let mut seen: HashSet<Configuration> = HashSet::new();
        while (batch.configs.len() as u64) < n {
            if batch.generated == cap {
                batch.saturated = true;
                break;
            }
            batch.generated += 1;
            let config = self.decode(&drawer.draw(&mut rng));
            let duplicate =
                seen.contains(&config) || exclude.is_some_and(|ex| ex.contains(&config));
            if duplicate {
                batch.rejected_repeated += 1;
            } else {
                seen.insert(config.clone());
                batch.configs.push(config);
            }
        }
        Ok(batch)
    }

    /// Chao1-style lower bound on the number of distinct configurations the
    /// fitted model can generate under `cond`, from `trials` raw draws:
    /// `d + s1² / (2·s2 + 1)` with `d` distinct, `s1` singletons, `s2`
    /// doubletons.
    pub fn estimate_unique(
        &self,
        cond: Option<&ConditionSpec>,
        trials: u64,
        seed: u64,
    ) -> Result<f64, CopulaError> {
        if trials < 1000 {
            return Err(CopulaError::TooFewTrials { found: trials });
        }
        let drawer = self.latent_drawer(cond)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut counts: HashMap<Configuration, u64> = HashMap::new();
        for _ in 0..trials {
            *counts
                .entry(self.decode(&drawer.draw(&mut rng)))
                .or_insert(0) += 1;
        }
        let distinct = counts.len() as f64;
        let singletons = counts.values().filter(|&&c| c == 1).count() as f64;
        let doubletons = counts.values().filter(|&&c| c == 2).count() as f64;
        Ok(distinct + singletons * singletons / (2.0 * doubletons + 1.0))
    }

    fn latent_drawer(&self, cond: Option<&ConditionSpec>) -> Result<LatentDrawer, CopulaError> {
        let d = self.corr.ncols();
        Ok(match cond {
            Some(c) => {
                let conditional = self.conditional_latent(c)?;
                LatentDrawer::new(conditional.mean, &conditional.cov)
            }
            None => LatentDrawer::new(DVector::zeros(d), &self.corr),
        })
    }

    /// Decodes the tunable coordinates of a latent vector into a
    /// configuration. Total for finite latents.
    fn decode(&self, latent: &DVector<f64>) -> Configuration {
        let values: Vec<Value> = self
            .transforms
            .iter()
            .take(self.space.tunables().len())
            .zip(latent.iter())
            .map(|(t, &z)| t.inverse(z))
            .collect();
        Configuration::from_values(values)
    }

    /// Writes the model as a single self-describing JSON document.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CopulaError> {
        let path = path.as_ref();
        let file = ModelFile {
            version: MODEL_FILE_VERSION,
            schema_fingerprint: format!("{:016x}", self.space.fingerprint()),
            space: (*self.space).clone(),
            marginals: self.transforms.clone(),
            correlation_dim: self.corr.ncols(),
            correlation: self.corr.transpose().as_slice().to_vec(),
            fitted_rows: self.fitted_rows,
            quantile: self.quantile,
            warnings: self.warnings.clone(),
        };
        let text =
            serde_json::to_string_pretty(&file).map_err(|e| CopulaError::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| CopulaError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CopulaError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CopulaError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: ModelFile =
            serde_json::from_str(&text).map_err(|e| CopulaError::Format(e.to_string()))?;
        if file.version != MODEL_FILE_VERSION {
            return Err(CopulaError::Format(format!(
                "unsupported model file version {} (expected {MODEL_FILE_VERSION})",
                file.version
            )));
        }
        let fingerprint = format!("{:016x}", file.space.fingerprint());
        if fingerprint != file.schema_fingerprint {
            return Err(CopulaError::Format(format!(
                "schema fingerprint mismatch: file says {}, embedded schema hashes to {fingerprint}",
                file.schema_fingerprint
            )));
        }
        let d = file.correlation_dim;
        if d != file.marginals.len() || file.correlation.len() != d * d {
            return Err(CopulaError::Format(
                "correlation dimensions disagree with the marginal count".into(),
            ));
        }
        Ok(Self {
            space: Arc::new(file.space),
            transforms: file.marginals,
            corr: DMatrix::from_row_slice(d, d, &file.correlation),
            fitted_rows: file.fitted_rows,
            quantile: file.quantile,
            warnings: file.warnings,
        })
    }
}

/// Uniform i.i.d. draws over the full space with the same dedup contract and
/// accounting as copula sampling; the baseline sampler.
pub fn random_batch(
    space: &ParameterSpace,
    n: u64,
    seed: u64,
    exclude: Option<&HashSet<Configuration>>,
) -> Result<SampleBatch, CopulaError> {
    if n == 0 {
        return Err(CopulaError::BadSampleCount);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let cap = n.saturating_mul(ATTEMPT_CAP_FACTOR);
    let mut batch = SampleBatch {
        configs: Vec::with_capacity(n as usize),
        generated: 0,
        rejected_repeated: 0,
        saturated: false,
    };
    let mut seen: HashSet<Configuration> = HashSet::new();
    let counts: Vec<u64> = space.tunables().iter().map(|p| p.option_count()).collect();
    let mut indices = vec![0u64; counts.len()];
    while (batch.configs.len() as u64) < n {
        if batch.generated == cap {
            batch.saturated = true;
            break;
        }
        batch.generated += 1;
        for (slot, &count) in indices.iter_mut().zip(&counts) {
            *slot = rng.random_range(0..count);
        }
        let config = space.config_at(&indices);
        let duplicate = seen.contains(&config) || exclude.is_some_and(|ex| ex.contains(&config));
        if duplicate {
            batch.rejected_repeated += 1;
        } else {
            seen.insert(config.clone());
            batch.configs.push(config);
        }
    }
    Ok(batch)
}

/// Conditions a zero-mean Gaussian with covariance `corr` on coordinate
/// `cond_index` taking latent value `z_c`. Exposed separately from the model
/// so the algebra can be checked against closed forms.
pub fn condition_gaussian(corr: &DMatrix<f64>, cond_index: usize, z_c: f64) -> ConditionalGaussian {
    let d = corr.ncols();
    assert!(cond_index < d, "condition column out of range");
    let rest: Vec<usize> = (0..d).filter(|&i| i != cond_index).collect();
    let sigma_cc = corr[(cond_index, cond_index)];
    let sigma_uu = DMatrix::from_fn(rest.len(), rest.len(), |i, j| corr[(rest[i], rest[j])]);
    if sigma_cc <= CONDITION_VARIANCE_FLOOR {
        return ConditionalGaussian {
            mean: DVector::zeros(rest.len()),
            cov: sigma_uu,
            condition_independent: true,
        };
    }
    let sigma_uc = DVector::from_fn(rest.len(), |i, _| corr[(rest[i], cond_index)]);
    let mean = &sigma_uc * (z_c / sigma_cc);
    let cov = &sigma_uu - &sigma_uc * sigma_uc.transpose() / sigma_cc;
    ConditionalGaussian {
        mean,
        cov: clip_to_psd(cov),
        condition_independent: false,
    }
}

/// Pearson correlation of the columns of `data` (rows are observations).
/// Constant columns get zero correlation with everything.
fn pearson_correlation(data: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = data.shape();
    let mut centered = data.clone();
    let mut stds = vec![0.0; d];
    for c in 0..d {
        let mean = data.column(c).sum() / n as f64;
        for r in 0..n {
            centered[(r, c)] -= mean;
        }
        stds[c] = (centered.column(c).norm_squared() / (n as f64 - 1.0)).sqrt();
    }
    DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else if stds[i] <= CONSTANT_LATENT_STD || stds[j] <= CONSTANT_LATENT_STD {
            0.0
        } else {
            let cov = centered.column(i).dot(&centered.column(j)) / (n as f64 - 1.0);
            (cov / (stds[i] * stds[j])).clamp(-1.0, 1.0)
        }
    })
}

/// Clips negative eigenvalues to zero (no diagonal renormalization).
fn clip_to_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let clipped = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0)),
    );
    symmetrize(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose())
}

/// Clips negative eigenvalues, then renormalizes back to unit diagonal so the
/// result is again a correlation matrix.
fn repair_correlation(m: DMatrix<f64>) -> DMatrix<f64> {
    let d = m.ncols();
    let sym = symmetrize(m);
    let eig = sym.clone().symmetric_eigen();
    let mut repaired = if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        sym
    } else {
        let clipped = DVector::from_iterator(
            eig.eigenvalues.len(),
            eig.eigenvalues.iter().map(|&l| l.max(0.0)),
        );
        let recomposed =
            &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        let scale: Vec<f64> = (0..d)
            .map(|i| {
                let v = recomposed[(i, i)];
                if v > 0.0 {
                    1.0 / v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        symmetrize(DMatrix::from_fn(d, d, |i, j| {
            recomposed[(i, j)] * scale[i] * scale[j]
        }))
    };
    for i in 0..d {
        repaired[(i, i)] = 1.0;
    }
    repaired
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

fn all_equal(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] == w[1])
}

struct LatentDrawer {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl LatentDrawer {
    /// Eigen-based factor `A` with `A Aᵀ = cov`; unlike Cholesky it tolerates
    /// the semidefinite covariances conditioning produces.
    fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Self {
        let eig = cov.clone().symmetric_eigen();
        let roots = DVector::from_iterator(
            eig.eigenvalues.len(),
            eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
        );
        Self {
            mean,
            factor: &eig.eigenvectors * DMatrix::from_diagonal(&roots),
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> DVector<f64> {
        let eps = DVector::from_fn(self.mean.len(), |_, _| rng.sample(StandardNormal));
        &self.mean + &self.factor * eps
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    schema_fingerprint: String,
    space: ParameterSpace,
    marginals: Vec<MarginalTransform>,
    correlation_dim: usize,
    /// Row-major, full matrix.
    correlation: Vec<f64>,
    fitted_rows: usize,
    quantile: Option<f64>,
    warnings: Vec<FitWarning>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TuningRecord;
    use crate::space::{ParamKind, ParameterDef, TaskFeature, TaskKind};

    fn int_space(sizes: &[u64]) -> Arc<ParameterSpace> {
        let params = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| ParameterDef {
                name: format!("p{i}"),
                kind: ParamKind::Integer {
                    lo: 0,
                    hi: n as i64 - 1,
                },
            })
            .collect();
        Arc::new(
            ParameterSpace::new(
                params,
                TaskFeature {
                    name: "size".into(),
                    kind: TaskKind::Real { lo: 0.0, hi: 100.0 },
                },
            )
            .unwrap(),
        )
    }

    fn dataset_from_indices(
        space: &Arc<ParameterSpace>,
        rows: impl IntoIterator<Item = (Vec<u64>, f64)>,
    ) -> Dataset {
        let records = rows
            .into_iter()
            .map(|(indices, task)| TuningRecord {
                config: space.config_at(&indices),
                task_value: task,
                objective: 1.0,
            })
            .collect();
        Dataset::new(Arc::clone(space), records).unwrap()
    }

    fn corr_invariants_hold(m: &DMatrix<f64>) {
        let d = m.ncols();
        for i in 0..d {
            assert!(m[(i, i)] <= 1.0 + 1e-12, "diagonal above 1 at {i}");
            for j in 0..d {
                assert!(
                    (m[(i, j)] - m[(j, i)]).abs() < 1e-12,
                    "asymmetry at ({i},{j})"
                );
            }
        }
        let eig = m.clone().symmetric_eigen();
        let min = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-9, "eigenvalue {min} below tolerance");
    }

    #[test]
    fn independent_columns_have_small_correlation() {
        let space = int_space(&[8, 8]);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let rows: Vec<(Vec<u64>, f64)> = (0..1000)
            .map(|_| {
                (
                    vec![rng.random_range(0..8), rng.random_range(0..8)],
                    rng.random_range(0..5) as f64 * 10.0,
                )
            })
            .collect();
        let ds = dataset_from_indices(&space, rows);
        let model = CopulaModel::fit_seeded(&ds, None, 7).unwrap();
        let c = model.correlation();
        assert!(c[(0, 1)].abs() < 0.1, "got {}", c[(0, 1)]);
        corr_invariants_hold(c);
    }

    #[test]
    fn identical_columns_have_unit_correlation() {
        let space = int_space(&[8, 8]);
        let rows: Vec<(Vec<u64>, f64)> = (0..200)
            .map(|i| {
                let v = (i % 8) as u64;
                (vec![v, v], (i % 3) as f64 * 10.0)
            })
            .collect();
        let ds = dataset_from_indices(&space, rows);
        let model = CopulaModel::fit_seeded(&ds, None, 7).unwrap();
        assert!(
            (model.correlation()[(0, 1)] - 1.0).abs() < 1e-9,
            "got {}",
            model.correlation()[(0, 1)]
        );
    }

    #[test]
    fn comonotone_pair_is_strongly_correlated() {
        let space = int_space(&[16, 16]);
        let rows: Vec<(Vec<u64>, f64)> = (0..400)
            .map(|i| {
                let v = (i % 16) as u64;
                (vec![v, 15 - v], (i % 4) as f64 * 10.0)
            })
            .collect();
        let ds = dataset_from_indices(&space, rows);
        let model = CopulaModel::fit_seeded(&ds, None, 7).unwrap();
        assert!(
            model.correlation()[(0, 1)] < -0.95,
            "antitone pair, got {}",
            model.correlation()[(0, 1)]
        );
    }

    #[test]
    fn fit_rejects_single_record_and_warns_on_single_task() {
        let space = int_space(&[4, 4]);
        let ds = dataset_from_indices(&space, vec![(vec![0, 0], 10.0)]);
        assert!(matches!(
            CopulaModel::fit_seeded(&ds, None, 1),
            Err(CopulaError::TooFewRecords { found: 1 })
        ));

        let ds = dataset_from_indices(&space, vec![(vec![0, 0], 10.0), (vec![1, 2], 10.0)]);
        let model = CopulaModel::fit_seeded(&ds, None, 1).unwrap();
        assert!(model.warnings().contains(&FitWarning::SingleTaskValue));
    }

    #[test]
    fn degenerate_column_warns_but_fits() {
        let space = int_space(&[4, 4]);
        let rows: Vec<(Vec<u64>, f64)> = (0..20)
            .map(|i| (vec![2, (i % 4) as u64], (i % 2) as f64 * 10.0))
            .collect();
        let ds = dataset_from_indices(&space, rows);
        let model = CopulaModel::fit_seeded(&ds, None, 1).unwrap();
        assert!(model
            .warnings()
            .iter()
            .any(|w| matches!(w, FitWarning::DegenerateColumn { column } if column == "p0")));
        corr_invariants_hold(model.correlation());
    }

    #[test]
    fn conditioning_with_zero_correlation_is_identity() {
        let corr = DMatrix::identity(3, 3);
        let c = condition_gaussian(&corr, 2, 1.7);
        assert_eq!(c.mean, DVector::zeros(2));
        assert_eq!(c.cov, DMatrix::identity(2, 2));
        assert!(!c.condition_independent);
    }

    #[test]
    fn bivariate_conditioning_matches_closed_form() {
        let corr = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let c = condition_gaussian(&corr, 1, 2.0);
        assert!((c.mean[0] - 1.0).abs() < 1e-10);
        assert!((c.cov[(0, 0)] - 0.75).abs() < 1e-10);
    }

    #[test]
    fn conditioning_at_fitted_median_centers_the_mean() {
        let space = int_space(&[8, 8]);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let rows: Vec<(Vec<u64>, f64)> = (0..300)
            .map(|_| {
                let t = rng.random_range(0..3) as f64 * 20.0 + 10.0;
                (vec![rng.random_range(0..8), rng.random_range(0..8)], t)
            })
            .collect();
        let ds = dataset_from_indices(&space, rows);
        let model = CopulaModel::fit_seeded(&ds, None, 5).unwrap();
        // The fitted task marginal's median decodes to latent zero, making
        // the conditional mean vanish regardless of correlations.
        let median = match &model.transforms().last().unwrap().kind {
            TransformKind::Numeric(m) => m.trunc_cdf_inv(0.5),
            _ => unreachable!(),
        };
        let cond = ConditionSpec::new(&space, median).unwrap();
        let c = model.conditional_latent(&cond).unwrap();
        assert!(c.mean.amax() < 1e-9, "mean {:?}", c.mean);
    }

    #[test]
    fn near_zero_condition_variance_flags_independent() {
        let mut corr = DMatrix::identity(3, 3);
        corr[(2, 2)] = 0.0;
        let c = condition_gaussian(&corr, 2, 1.0);
        assert!(c.condition_independent);
        assert_eq!(c.cov, DMatrix::identity(2, 2));
    }

    #[test]
    fn sample_one_is_unique_and_accounted() {
        let space = int_space(&[4, 4]);
        let ds = dataset_from_indices(
            &space,
            (0..40).map(|i| {
                (
                    vec![(i % 4) as u64, (i / 4 % 4) as u64],
                    (i % 2) as f64 * 50.0,
                )
            }),
        );
        let model = CopulaModel::fit_seeded(&ds, None, 2).unwrap();
        let cond = ConditionSpec::new(&space, 25.0).unwrap();
        let batch = model.sample(Some(&cond), 1, 9, None).unwrap();
        assert_eq!(batch.configs.len(), 1);
        assert_eq!(batch.rejected_repeated, 0);
        assert_eq!(batch.generated, 1);
        assert!(!batch.saturated);
    }

    #[test]
    fn sampling_a_tiny_support_saturates() {
        let space = int_space(&[2, 2]);
        let ds = dataset_from_indices(
            &space,
            (0..40).map(|i| {
                (
                    vec![(i % 2) as u64, (i / 2 % 2) as u64],
                    (i % 2) as f64 * 50.0,
                )
            }),
        );
        let model = CopulaModel::fit_seeded(&ds, None, 2).unwrap();
        let cond = ConditionSpec::new(&space, 25.0).unwrap();
        let batch = model.sample(Some(&cond), 10, 9, None).unwrap();
        assert!(batch.saturated);
        assert!(batch.configs.len() <= 4);
        assert_eq!(
            batch.generated,
            batch.configs.len() as u64 + batch.rejected_repeated
        );
        // Everything generated must exist in the enumerated space.
        let all: HashSet<Configuration> = space.enumerate(10).unwrap().collect();
        assert!(batch.configs.iter().all(|c| all.contains(c)));
    }

    #[test]
    fn sampling_honors_exclusion_set() {
        let space = int_space(&[2, 2]);
        let ds = dataset_from_indices(
            &space,
            (0..40).map(|i| {
                (
                    vec![(i % 2) as u64, (i / 2 % 2) as u64],
                    (i % 2) as f64 * 50.0,
                )
            }),
        );
        let model = CopulaModel::fit_seeded(&ds, None, 2).unwrap();
        let cond = ConditionSpec::new(&space, 25.0).unwrap();
        let exclude: HashSet<Configuration> = space.enumerate(10).unwrap().take(2).collect();
        let batch = model.sample(Some(&cond), 4, 9, Some(&exclude)).unwrap();
        assert!(batch.configs.iter().all(|c| !exclude.contains(c)));
        assert!(batch.configs.len() <= 2);
        assert!(batch.saturated);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let space = int_space(&[6, 6]);
        let ds = dataset_from_indices(
            &space,
            (0..60).map(|i| {
                (
                    vec![(i % 6) as u64, (i / 6 % 6) as u64],
                    (i % 3) as f64 * 30.0,
                )
            }),
        );
        let model = CopulaModel::fit_seeded(&ds, None, 2).unwrap();
        let cond = ConditionSpec::new(&space, 45.0).unwrap();
        let a = model.sample(Some(&cond), 12, 1234, None).unwrap();
        let b = model.sample(Some(&cond), 12, 1234, None).unwrap();
        assert_eq!(a, b);
        let c = model.sample(Some(&cond), 12, 1235, None).unwrap();
        assert_ne!(a.configs, c.configs);
    }

    #[test]
    fn estimate_unique_brackets_tiny_supports() {
        // All marginals constant: exactly one generable configuration.
        let space = int_space(&[4, 4]);
        let ds = dataset_from_indices(&space, (0..20).map(|i| (vec![1, 2], (i % 2) as f64 * 50.0)));
        let model = CopulaModel::fit_seeded(&ds, None, 2).unwrap();
        let cond = ConditionSpec::new(&space, 25.0).unwrap();
        let est = model.estimate_unique(Some(&cond), 10_000, 3).unwrap();
        assert!((est - 1.0).abs() < 1e-9, "got {est}");
    }

    #[test]
    fn estimate_unique_matches_enumerated_support() {
        let space = int_space(&[2, 2, 2]);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let rows: Vec<(Vec<u64>, f64)> = (0..400)
            .map(|_| {
                (
                    vec![
                        rng.random_range(0..2),
                        rng.random_range(0..2),
                        rng.random_range(0..2),
                    ],
                    rng.random_range(0..2) as f64 * 50.0,
                )
            })
            .collect();
        let ds = dataset_from_indices(&space, rows);
        let model = CopulaModel::fit_seeded(&ds, None, 2).unwrap();
        let cond = ConditionSpec::new(&space, 25.0).unwrap();
        let est = model.estimate_unique(Some(&cond), 10_000, 3).unwrap();
        assert!((est - 8.0).abs() <= 1.0, "got {est}");

        // Four-configuration support: every config is seen far more than
        // twice in 10^4 draws, so the estimate collapses to the truth.
        let space = int_space(&[2, 2]);
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let rows: Vec<(Vec<u64>, f64)> = (0..400)
            .map(|_| {
                (
                    vec![rng.random_range(0..2), rng.random_range(0..2)],
                    rng.random_range(0..2) as f64 * 50.0,
                )
            })
            .collect();
        let ds = dataset_from_indices(&space, rows);
        let model = CopulaModel::fit_seeded(&ds, None, 2).unwrap();
        let cond = ConditionSpec::new(&space, 25.0).unwrap();
        let est = model.estimate_unique(Some(&cond), 10_000, 3).unwrap();
        assert!((4.0..=4.5).contains(&est), "got {est}");
    }

    #[test]
    fn random_batch_covers_tiny_space_and_is_uniform() {
        let space = int_space(&[2, 2]);
        let batch = random_batch(&space, 4, 77, None).unwrap();
        assert_eq!(batch.configs.len(), 4);
        let all: HashSet<Configuration> = space.enumerate(10).unwrap().collect();
        assert_eq!(batch.configs.iter().cloned().collect::<HashSet<_>>(), all);

        let wide = int_space(&[2, 1000]);
        let mut zeros = 0u64;
        let n = 10_000;
        let batch = random_batch(&wide, n, 5, None).unwrap();
        for c in &batch.configs {
            if c.values()[0] == Value::Int(0) {
                zeros += 1;
            }
        }
        let freq = zeros as f64 / batch.configs.len() as f64;
        assert!((freq - 0.5).abs() < 0.02, "got {freq}");
    }

    #[test]
    fn conditional_covariances_pass_psd_checks() {
        let space = int_space(&[8, 8, 8]);
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let rows: Vec<(Vec<u64>, f64)> = (0..300)
            .map(|_| {
                let t = rng.random_range(0..3) as u64;
                // Tie every column loosely to the task so conditioning has bite.
                (
                    vec![
                        (t * 2 + rng.random_range(0..4)) % 8,
                        (t * 3 + rng.random_range(0..3)) % 8,
                        rng.random_range(0..8),
                    ],
                    t as f64 * 30.0 + 10.0,
                )
            })
            .collect();
        let ds = dataset_from_indices(&space, rows);
        let model = CopulaModel::fit_seeded(&ds, None, 2).unwrap();
        corr_invariants_hold(model.correlation());
        for task in [10.0, 25.0, 40.0, 70.0, 95.0] {
            let cond = ConditionSpec::new(&space, task).unwrap();
            let c = model.conditional_latent(&cond).unwrap();
            corr_invariants_hold(&c.cov);
        }
    }

    #[test]
    fn comonotone_tunable_shifts_with_condition() {
        let space = int_space(&[32, 4]);
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let rows: Vec<(Vec<u64>, f64)> = (0..600)
            .map(|_| {
                let t = rng.random_range(0..3) as u64;
                let x = (t * 10 + rng.random_range(0..8)).min(31);
                (vec![x, rng.random_range(0..4)], t as f64 * 30.0 + 20.0)
            })
            .collect();
        let ds = dataset_from_indices(&space, rows);
        let model = CopulaModel::fit_seeded(&ds, None, 2).unwrap();

        // Raw (non-deduplicated) draws, so the means are unbiased.
        let mean_x = |task: f64, seed: u64| -> f64 {
            let cond = ConditionSpec::new(&space, task).unwrap();
            let drawer = model.latent_drawer(Some(&cond)).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut total = 0.0;
            for _ in 0..1000 {
                let config = model.decode(&drawer.draw(&mut rng));
                total += config.values()[0].as_f64().unwrap();
            }
            total / 1000.0
        };
        let low = mean_x(20.0, 100);
        let high = mean_x(80.0, 101);
        assert!(
            high > low + 3.0,
            "conditioning failed to shift the comonotone column: low {low}, high {high}"
        );
    }

    #[test]
    fn small_space_sampling_reaches_every_positive_probability_config() {
        let space = int_space(&[4, 4, 4]);
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let rows: Vec<(Vec<u64>, f64)> = (0..800)
            .map(|_| {
                (
                    vec![
                        rng.random_range(0..4),
                        rng.random_range(0..4),
                        rng.random_range(0..4),
                    ],
                    rng.random_range(0..2) as f64 * 60.0 + 20.0,
                )
            })
            .collect();
        let ds = dataset_from_indices(&space, rows);
        let model = CopulaModel::fit_seeded(&ds, None, 2).unwrap();
        let cond = ConditionSpec::new(&space, 50.0).unwrap();
        let drawer = model.latent_drawer(Some(&cond)).unwrap();
        let mut draw_rng = ChaCha12Rng::seed_from_u64(99);
        let mut seen: HashSet<Configuration> = HashSet::new();
        for _ in 0..100_000 {
            seen.insert(model.decode(&drawer.draw(&mut draw_rng)));
        }
        // Uniformly fit small space: every configuration has positive
        // probability, so raw draws must reach all of them.
        assert_eq!(seen.len() as u128, space.cardinality().unwrap());
    }

    #[test]
    fn latent_drawer_reproduces_conditional_moments() {
        let corr = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.6, 0.3, 1.0, -0.4, 0.6, -0.4, 1.0]);
        let conditional = condition_gaussian(&corr, 2, 1.5);
        let drawer = LatentDrawer::new(conditional.mean.clone(), &conditional.cov);
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        let n = 200_000;
        let mut sum = DVector::zeros(2);
        let mut cross = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let z = drawer.draw(&mut rng);
            sum += &z;
            cross += &z * z.transpose();
        }
        let mean = sum / n as f64;
        let cov = cross / n as f64 - &mean * mean.transpose();
        // Standard errors at n = 2e5 are below 0.01; allow 4 of them.
        for i in 0..2 {
            assert!(
                (mean[i] - conditional.mean[i]).abs() < 0.01,
                "mean[{i}] {} vs {}",
                mean[i],
                conditional.mean[i]
            );
            for j in 0..2 {
                assert!(
                    (cov[(i, j)] - conditional.cov[(i, j)]).abs() < 0.02,
                    "cov[({i},{j})] {} vs {}",
                    cov[(i, j)],
                    conditional.cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn model_file_round_trips() {
        let space = Arc::new(
            ParameterSpace::new(
                vec![
                    ParameterDef {
                        name: "tile".into(),
                        kind: ParamKind::Integer { lo: 0, hi: 7 },
                    },
                    ParameterDef {
                        name: "ratio".into(),
                        kind: ParamKind::Real {
                            lo: 0.0,
                            hi: 1.0,
                            grid: 5,
                        },
                    },
                    ParameterDef {
                        name: "pack".into(),
                        kind: ParamKind::Categorical {
                            values: vec!["on".into(), "off".into()],
                        },
                    },
                ],
                TaskFeature {
                    name: "size".into(),
                    kind: TaskKind::Real { lo: 0.0, hi: 100.0 },
                },
            )
            .unwrap(),
        );
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let records: Vec<TuningRecord> = (0..50)
            .map(|_| TuningRecord {
                config: space.config_at(&[
                    rng.random_range(0..8),
                    rng.random_range(0..5),
                    rng.random_range(0..2),
                ]),
                task_value: rng.random_range(0..3) as f64 * 40.0 + 10.0,
                objective: 1.0,
            })
            .collect();
        let ds = Dataset::new(Arc::clone(&space), records).unwrap();
        let model = CopulaModel::fit_seeded(&ds, Some(0.3), 8).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let reloaded = CopulaModel::load(&path).unwrap();
        assert_eq!(model, reloaded);

        let cond = ConditionSpec::new(&space, 30.0).unwrap();
        let a = model.sample(Some(&cond), 5, 7, None).unwrap();
        let b = reloaded.sample(Some(&cond), 5, 7, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn condition_spec_requires_in_domain_value() {
        let space = int_space(&[4, 4]);
        assert!(ConditionSpec::new(&space, 120.0).is_err());
        assert!(ConditionSpec::new(&space, 100.0).is_ok());
    }
}
