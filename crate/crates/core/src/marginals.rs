//! Per-column invertible transforms between raw parameter values and
//! standard-normal latents.
//!
//! Numeric columns use a truncated Gaussian fit by sample moments; the
//! probability integral transform maps a value through the truncated CDF to
//! a uniform and on to a standard-normal latent. Categorical columns are
//! linearized into contiguous sub-intervals of [0, 1) ordered by descending
//! fitting-data frequency, so more common categories occupy more latent mass.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::space::{grid_value, Value};

/// Latents are clamped to this magnitude; the normal CDF saturates to 0/1
/// beyond it at double precision.
pub const LATENT_CLAMP: f64 = 8.0;

/// Standard-deviation floor, as a fraction of the domain span.
const STD_FLOOR_FRACTION: f64 = 1e-6;

/// Pseudo-count granted to categories that appear in the schema but not in
/// the fitting data, in units of one observation.
const UNOBSERVED_PSEUDOCOUNT: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum MarginalError {
    #[error("column `{column}`: fewer than 2 values to fit a marginal")]
    Degenerate { column: String },
    #[error("column `{column}`: value {value} outside [{lo}, {hi}]")]
    OutOfDomain {
        column: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("column `{column}`: unknown category `{category}`")]
    UnknownCategory { column: String, category: String },
    #[error("column `{column}`: expected a {expected} value")]
    KindMismatch {
        column: String,
        expected: &'static str,
    },
}

fn phi(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

fn phi_inv(u: f64) -> f64 {
    Normal::standard().inverse_cdf(u.clamp(0.0, 1.0))
}

fn std_normal_pdf(z: f64) -> f64 {
    Normal::standard().pdf(z)
}

/// How decoded numeric values are discretized back onto the parameter domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Rounding {
    /// Continuous column (the task feature): clamp only.
    None,
    /// Round to the nearest integer.
    Integer,
    /// Round to the nearest point of an evenly spaced grid.
    Grid { count: u32 },
}

/// Truncated Gaussian over [lo, hi], moment-fit from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericMarginal {
    pub mean: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
    pub rounding: Rounding,
}

impl NumericMarginal {
    /// Fits by sample mean and (n-1)-denominator standard deviation, floored
    /// at a small fraction of the span so constant columns stay usable.
    pub fn fit(
        column: &str,
        values: &[f64],
        lo: f64,
        hi: f64,
        rounding: Rounding,
    ) -> Result<Self, MarginalError> {
        if values.len() < 2 {
            return Err(MarginalError::Degenerate {
                column: column.to_string(),
            });
        }
        debug_assert!(values.iter().all(|v| *v >= lo && *v <= hi));
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt().max(STD_FLOOR_FRACTION * (hi - lo));
        Ok(Self {
            mean,
            std,
            lo,
            hi,
            rounding,
        })
    }

    fn alpha_beta(&self) -> (f64, f64) {
        (
            phi((self.lo - self.mean) / self.std),
            phi((self.hi - self.mean) / self.std),
        )
    }

    /// CDF of the truncated Gaussian; 0 at lo and 1 at hi by construction.
    pub fn trunc_cdf(&self, x: f64) -> f64 {
        let (alpha, beta) = self.alpha_beta();
        let u = (phi((x - self.mean) / self.std) - alpha) / (beta - alpha).max(f64::MIN_POSITIVE);
        u.clamp(0.0, 1.0)
    }

    /// Inverse truncated CDF, before any grid rounding.
    pub fn trunc_cdf_inv(&self, u: f64) -> f64 {
        let (alpha, beta) = self.alpha_beta();
        let p = alpha + u.clamp(0.0, 1.0) * (beta - alpha);
        let x = self.mean + self.std * phi_inv(p);
        x.clamp(self.lo, self.hi)
    }

    /// Mean of the truncated distribution (closed form).
    pub fn truncated_mean(&self) -> f64 {
        let a = (self.lo - self.mean) / self.std;
        let b = (self.hi - self.mean) / self.std;
        let z = (phi(b) - phi(a)).max(f64::MIN_POSITIVE);
        self.mean + self.std * (std_normal_pdf(a) - std_normal_pdf(b)) / z
    }

    /// Variance of the truncated distribution (closed form).
    pub fn truncated_var(&self) -> f64 {
        let a = (self.lo - self.mean) / self.std;
        let b = (self.hi - self.mean) / self.std;
        let z = (phi(b) - phi(a)).max(f64::MIN_POSITIVE);
        let ratio = (a * std_normal_pdf(a) - b * std_normal_pdf(b)) / z;
        let shift = (std_normal_pdf(a) - std_normal_pdf(b)) / z;
        (self.std * self.std * (1.0 + ratio - shift * shift)).max(0.0)
    }

    pub fn forward(&self, x: f64) -> f64 {
        phi_inv(self.trunc_cdf(x)).clamp(-LATENT_CLAMP, LATENT_CLAMP)
    }

    pub fn inverse(&self, z: f64) -> f64 {
        let x = self.trunc_cdf_inv(phi(z));
        match self.rounding {
            Rounding::None => x,
            Rounding::Integer => x.round().clamp(self.lo, self.hi),
            Rounding::Grid { count } => {
                let step = (self.hi - self.lo) / ((count - 1) as f64);
                let i = (((x - self.lo) / step).round() as i64).clamp(0, count as i64 - 1) as u32;
                grid_value(self.lo, self.hi, count, i)
            }
        }
    }
}

/// Frequency-ordered interval encoding of a categorical column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalMarginal {
    /// Categories in interval order: descending fitting-data frequency,
    /// ties broken by schema order. Every schema category appears.
    pub categories: Vec<String>,
    /// Interval widths, summing to 1; unobserved categories get a small
    /// smoothed width so they stay generable.
    pub widths: Vec<f64>,
}

impl CategoricalMarginal {
    pub fn fit(values: &[&str], schema_options: &[String]) -> Self {
        let mut counts: Vec<f64> = schema_options
            .iter()
            .map(|opt| values.iter().filter(|v| *v == opt).count() as f64)
            .collect();
        for c in counts.iter_mut() {
            if *c == 0.0 {
                *c = UNOBSERVED_PSEUDOCOUNT;
            }
        }
        let mut order: Vec<usize> = (0..schema_options.len()).collect();
        // Stable sort: ties fall back to schema order.
        order.sort_by(|&a, &b| counts[b].partial_cmp(&counts[a]).unwrap());
        let total: f64 = counts.iter().sum();
        Self {
            categories: order.iter().map(|&i| schema_options[i].clone()).collect(),
            widths: order.iter().map(|&i| counts[i] / total).collect(),
        }
    }

    /// The [start, end) interval of a category.
    pub fn interval(&self, category: &str) -> Option<(f64, f64)> {
        let mut start = 0.0;
        for (cat, w) in self.categories.iter().zip(&self.widths) {
            if cat == category {
                return Some((start, start + w));
            }
            start += w;
        }
        None
    }

    fn encode(&self, category: &str, u_in_interval: f64) -> Option<f64> {
        let (a, b) = self.interval(category)?;
        let u = a + u_in_interval * (b - a);
        Some(phi_inv(u).clamp(-LATENT_CLAMP, LATENT_CLAMP))
    }

    /// Deterministic encode at the interval midpoint.
    pub fn forward(&self, category: &str) -> Option<f64> {
        self.encode(category, 0.5)
    }

    /// Stochastic encode uniformly within the interval; used while fitting so
    /// repeated categories do not collapse to one latent point.
    pub fn forward_stochastic(&self, category: &str, rng: &mut impl Rng) -> Option<f64> {
        self.encode(category, rng.random::<f64>())
    }

    pub fn inverse(&self, z: f64) -> &str {
        let u = phi(z);
        let mut start = 0.0;
        for (cat, w) in self.categories.iter().zip(&self.widths) {
            start += w;
            if u < start {
                return cat;
            }
        }
        // u == 1.0 (or accumulated rounding): the last interval is closed.
        self.categories.last().expect("at least one category")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TransformKind {
    Numeric(NumericMarginal),
    Categorical(CategoricalMarginal),
}

/// One column's invertible map between raw values and standard-normal
/// latents. Immutable after fit; `forward`/`inverse` are pure, and the
/// stochastic categorical encode takes the caller's RNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTransform {
    pub column: String,
    pub kind: TransformKind,
}

impl MarginalTransform {
    /// Deterministic encode: truncated-CDF transform for numerics, interval
    /// midpoint for categoricals.
    pub fn forward(&self, value: &Value) -> Result<f64, MarginalError> {
        match &self.kind {
            TransformKind::Numeric(m) => {
                let x = self.numeric_input(value)?;
                Ok(m.forward(x))
            }
            TransformKind::Categorical(m) => {
                let cat = self.category_input(value)?;
                m.forward(cat)
                    .ok_or_else(|| MarginalError::UnknownCategory {
                        column: self.column.clone(),
                        category: cat.to_string(),
                    })
            }
        }
    }

    /// Encode with stochastic placement inside categorical intervals.
    pub fn forward_stochastic(
        &self,
        value: &Value,
        rng: &mut impl Rng,
    ) -> Result<f64, MarginalError> {
        match &self.kind {
            TransformKind::Numeric(_) => self.forward(value),
            TransformKind::Categorical(m) => {
                let cat = self.category_input(value)?;
                m.forward_stochastic(cat, rng)
                    .ok_or_else(|| MarginalError::UnknownCategory {
                        column: self.column.clone(),
                        category: cat.to_string(),
                    })
            }
        }
    }

    /// Decodes a finite latent to an in-domain value. Total: saturates at the
    /// domain edges for extreme latents.
    pub fn inverse(&self, z: f64) -> Value {
        match &self.kind {
            TransformKind::Numeric(m) => {
                let x = m.inverse(z);
                match m.rounding {
                    Rounding::Integer => Value::Int(x as i64),
                    _ => Value::Real(x),
                }
            }
            TransformKind::Categorical(m) => Value::Cat(m.inverse(z).to_string()),
        }
    }

    /// Forward transform for a raw numeric (used for condition values).
    pub fn forward_f64(&self, x: f64) -> Result<f64, MarginalError> {
        match &self.kind {
            TransformKind::Numeric(m) => {
                if x < m.lo || x > m.hi || !x.is_finite() {
                    return Err(MarginalError::OutOfDomain {
                        column: self.column.clone(),
                        value: x,
                        lo: m.lo,
                        hi: m.hi,
                    });
                }
                Ok(m.forward(x))
            }
            TransformKind::Categorical(_) => Err(MarginalError::KindMismatch {
                column: self.column.clone(),
                expected: "numeric",
            }),
        }
    }

    fn numeric_input(&self, value: &Value) -> Result<f64, MarginalError> {
        let x = value.as_f64().ok_or_else(|| MarginalError::KindMismatch {
            column: self.column.clone(),
            expected: "numeric",
        })?;
        if let TransformKind::Numeric(m) = &self.kind {
            if x < m.lo || x > m.hi {
                return Err(MarginalError::OutOfDomain {
                    column: self.column.clone(),
                    value: x,
                    lo: m.lo,
                    hi: m.hi,
                });
            }
        }
        Ok(x)
    }

    fn category_input<'a>(&self, value: &'a Value) -> Result<&'a str, MarginalError> {
        match value {
            Value::Cat(c) => Ok(c.as_str()),
            _ => Err(MarginalError::KindMismatch {
                column: self.column.clone(),
                expected: "categorical",
            }),
        }
    }
}
