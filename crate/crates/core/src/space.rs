//! Tuning-space schemas: parameter definitions, configurations, and exact
//! enumeration/counting over the finite product space.
//!
//! A space is an ordered list of tunable parameters plus exactly one numeric
//! task feature (the conditioning variable, e.g. input size). Every tunable
//! has a finite option list: integers enumerate their inclusive range,
//! categoricals their value list, and reals must declare an explicit grid so
//! the combinatoric count stays finite.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance (in grid-step units) when snapping a raw real to its grid.
const GRID_SNAP_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("failed to read schema file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("schema parse error: {0}")]
    Parse(String),
    #[error("invalid schema: {0}")]
    Invalid(String),
    #[error("cardinality overflow while counting the space")]
    CardinalityOverflow,
    #[error("cardinality {cardinality} exceeds enumeration cap {cap}")]
    CapExceeded { cardinality: u128, cap: u128 },
}

/// One problem found while validating a raw record against a space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldIssue {
    pub field: String,
    pub problem: String,
}

impl fmt::Display for FieldIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.problem)
    }
}

/// Validation failure carrying every violating field, not just the first.
#[derive(Debug, Clone, Error)]
pub struct ValidateError {
    pub issues: Vec<FieldIssue>,
}

impl fmt::Display for ValidateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: ")?;
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

/// Domain of a single tunable parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ParamKind {
    Integer {
        lo: i64,
        hi: i64,
    },
    Real {
        lo: f64,
        hi: f64,
        /// Number of evenly spaced grid points (>= 2) in [lo, hi].
        grid: u32,
    },
    Categorical {
        values: Vec<String>,
    },
}

/// A named tunable parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDef {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
}

/// Domain of the task feature. Always numeric; never gridded because it does
/// not contribute to the combinatoric count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskKind {
    Integer { lo: i64, hi: i64 },
    Real { lo: f64, hi: f64 },
}

/// The distinguished non-tunable instance descriptor (e.g. input size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFeature {
    pub name: String,
    #[serde(flatten)]
    pub kind: TaskKind,
}

impl TaskFeature {
    pub fn bounds(&self) -> (f64, f64) {
        match self.kind {
            TaskKind::Integer { lo, hi } => (lo as f64, hi as f64),
            TaskKind::Real { lo, hi } => (lo, hi),
        }
    }

    pub fn contains(&self, value: f64) -> bool {
        let (lo, hi) = self.bounds();
        value.is_finite() && value >= lo && value <= hi
    }

    /// Whether `value` is acceptable as an observed task value in a record.
    /// Integer task features additionally require integral values.
    pub fn accepts_record_value(&self, value: f64) -> bool {
        self.contains(value)
            && match self.kind {
                TaskKind::Integer { .. } => value.fract() == 0.0,
                TaskKind::Real { .. } => true,
            }
    }
}

/// A concrete value of one tunable parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Real(f64),
    Cat(String),
}

// Real values are always canonical grid points produced by `option_value`,
// so bitwise f64 identity is the right equality and never sees NaN.
impl Eq for Value {}

impl std::hash::Hash for Value {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        match self {
            Value::Int(v) => {
                state.write_u8(0);
                v.hash(state);
            }
            Value::Real(v) => {
                state.write_u8(1);
                v.to_bits().hash(state);
            }
            Value::Cat(v) => {
                state.write_u8(2);
                v.hash(state);
            }
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Real(v) => write!(f, "{v}"),
            Value::Cat(v) => write!(f, "{v}"),
        }
    }
}

impl Value {
    /// Numeric view; categorical values have none.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(v) => Some(*v as f64),
            Value::Real(v) => Some(*v),
            Value::Cat(_) => None,
        }
    }
}

/// The i-th point of an evenly spaced grid over [lo, hi]. The endpoints are
/// returned exactly so decoded values compare bitwise-equal to enumerated ones.
pub(crate) fn grid_value(lo: f64, hi: f64, count: u32, i: u32) -> f64 {
    debug_assert!(i < count);
    if i == 0 {
        lo
    } else if i == count - 1 {
        hi
    } else {
        lo + (i as f64) * (hi - lo) / ((count - 1) as f64)
    }
}

impl ParameterDef {
    /// Number of distinct options this parameter contributes to |C|.
    pub fn option_count(&self) -> u64 {
        match &self.kind {
            ParamKind::Integer { lo, hi } => (hi - lo) as u64 + 1,
            ParamKind::Real { grid, .. } => *grid as u64,
            ParamKind::Categorical { values } => values.len() as u64,
        }
    }

    /// The canonical value at option index `i` (0-based, schema order).
    pub fn option_value(&self, i: u64) -> Value {
        debug_assert!(i < self.option_count());
        match &self.kind {
            ParamKind::Integer { lo, .. } => Value::Int(lo + i as i64),
            ParamKind::Real { lo, hi, grid } => Value::Real(grid_value(*lo, *hi, *grid, i as u32)),
            ParamKind::Categorical { values } => Value::Cat(values[i as usize].clone()),
        }
    }

    /// Option index of a canonical in-domain value.
    pub fn option_index(&self, value: &Value) -> Option<u64> {
        match (&self.kind, value) {
            (ParamKind::Integer { lo, hi }, Value::Int(v)) if v >= lo && v <= hi => {
                Some((v - lo) as u64)
            }
            (ParamKind::Real { lo, hi, grid }, Value::Real(v)) => {
                let step = (hi - lo) / ((*grid - 1) as f64);
                if !v.is_finite() || *v < lo - step || *v > hi + step {
                    return None;
                }
                let i = (((v - lo) / step).round() as i64).clamp(0, *grid as i64 - 1) as u32;
                let snapped = grid_value(*lo, *hi, *grid, i);
                ((v - snapped).abs() <= step * GRID_SNAP_TOL).then_some(i as u64)
            }
            (ParamKind::Categorical { values }, Value::Cat(v)) => {
                values.iter().position(|c| c == v).map(|i| i as u64)
            }
            _ => None,
        }
    }

    /// Parses a raw cell and canonicalizes it into this parameter's domain.
    /// Integers accept a trailing `.0`; reals snap to the nearest grid point.
    pub fn parse_value(&self, raw: &str) -> Result<Value, String> {
        let raw = raw.trim();
        match &self.kind {
            ParamKind::Integer { lo, hi } => {
                let x: f64 = raw
                    .parse()
                    .map_err(|_| format!("expected an integer, got `{raw}`"))?;
                if x.fract() != 0.0 {
                    return Err(format!("expected an integer, got non-integral `{raw}`"));
                }
                let v = x as i64;
                if v < *lo || v > *hi {
                    return Err(format!("{v} outside [{lo}, {hi}]"));
                }
                Ok(Value::Int(v))
            }
            ParamKind::Real { lo, hi, grid } => {
                let x: f64 = raw
                    .parse()
                    .map_err(|_| format!("expected a number, got `{raw}`"))?;
                if !x.is_finite() {
                    return Err(format!("non-finite value `{raw}`"));
                }
                if x < *lo || x > *hi {
                    return Err(format!("{x} outside [{lo}, {hi}]"));
                }
                let step = (hi - lo) / ((*grid - 1) as f64);
                let i = (((x - lo) / step).round() as i64).clamp(0, *grid as i64 - 1) as u32;
                let snapped = grid_value(*lo, *hi, *grid, i);
                if (x - snapped).abs() > step * GRID_SNAP_TOL {
                    return Err(format!("{x} is not on the declared {grid}-point grid"));
                }
                Ok(Value::Real(snapped))
            }
            ParamKind::Categorical { values } => {
                if values.iter().any(|c| c == raw) {
                    Ok(Value::Cat(raw.to_string()))
                } else {
                    Err(format!(
                        "unknown category `{raw}` (expected one of: {})",
                        values.join(", ")
                    ))
                }
            }
        }
    }

    fn check(&self) -> Result<(), String> {
        match &self.kind {
            ParamKind::Integer { lo, hi } => {
                if lo >= hi {
                    return Err(format!("parameter `{}`: lo must be < hi", self.name));
                }
            }
            ParamKind::Real { lo, hi, grid } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(format!(
                        "parameter `{}`: bounds must be finite with lo < hi",
                        self.name
                    ));
                }
                if *grid < 2 {
                    return Err(format!(
                        "parameter `{}`: real parameters must declare a grid of at least 2 points",
                        self.name
                    ));
                }
            }
            ParamKind::Categorical { values } => {
                if values.is_empty() {
                    return Err(format!(
                        "parameter `{}`: categorical value list is empty",
                        self.name
                    ));
                }
                let mut seen = HashSet::new();
                for v in values {
                    if !seen.insert(v.as_str()) {
                        return Err(format!(
                            "parameter `{}`: duplicate category `{v}`",
                            self.name
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One point of the tuning space: a value per tunable, in schema order.
///
/// Equality and hashing are value-wise, so configurations can key sets and
/// maps for duplicate rejection.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Configuration {
    values: Vec<Value>,
}

impl Configuration {
    pub(crate) fn from_values(values: Vec<Value>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[Value] {
        &self.values
    }

    /// (name, value) pairs in schema order.
    pub fn iter_named<'a>(
        &'a self,
        space: &'a ParameterSpace,
    ) -> impl Iterator<Item = (&'a str, &'a Value)> {
        space
            .tunables()
            .iter()
            .map(|p| p.name.as_str())
            .zip(self.values.iter())
    }

    pub fn get<'a>(&'a self, space: &ParameterSpace, name: &str) -> Option<&'a Value> {
        let idx = space.tunables().iter().position(|p| p.name == name)?;
        self.values.get(idx)
    }
}

/// Ordered schema of tunable parameters plus one task feature.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpace {
    parameters: Vec<ParameterDef>,
    task_feature: TaskFeature,
}

impl ParameterSpace {
    pub fn new(
        parameters: Vec<ParameterDef>,
        task_feature: TaskFeature,
    ) -> Result<Self, SpaceError> {
        let space = Self {
            parameters,
            task_feature,
        };
        space.check()?;
        Ok(space)
    }

    fn check(&self) -> Result<(), SpaceError> {
        if self.parameters.is_empty() {
            return Err(SpaceError::Invalid(
                "schema declares no tunable parameters".into(),
            ));
        }
        let mut names = HashSet::new();
        for p in &self.parameters {
            p.check().map_err(SpaceError::Invalid)?;
            if !names.insert(p.name.as_str()) {
                return Err(SpaceError::Invalid(format!(
                    "duplicate parameter name `{}`",
                    p.name
                )));
            }
        }
        if names.contains(self.task_feature.name.as_str()) {
            return Err(SpaceError::Invalid(format!(
                "task feature `{}` collides with a tunable parameter",
                self.task_feature.name
            )));
        }
        let (lo, hi) = self.task_feature.bounds();
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(SpaceError::Invalid(format!(
                "task feature `{}`: bounds must be finite with lo < hi",
                self.task_feature.name
            )));
        }
        Ok(())
    }

    pub fn tunables(&self) -> &[ParameterDef] {
        &self.parameters
    }

    pub fn task_feature(&self) -> &TaskFeature {
        &self.task_feature
    }

    /// Loads and validates a schema from its TOML file form.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SpaceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SpaceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SpaceError> {
        let space: ParameterSpace =
            toml::from_str(text).map_err(|e| SpaceError::Parse(e.to_string()))?;
        space.check()?;
        Ok(space)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("schema serialization cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SpaceError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()).map_err(|source| SpaceError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// |C|: the product of per-parameter option counts.
    pub fn cardinality(&self) -> Result<u128, SpaceError> {
        let mut total: u128 = 1;
        for p in &self.parameters {
            total = total
                .checked_mul(p.option_count() as u128)
                .ok_or(SpaceError::CardinalityOverflow)?;
        }
        Ok(total)
    }

    /// Yields every configuration exactly once, in lexicographic order of the
    /// schema (first parameter varies slowest). Refuses when |C| exceeds `cap`.
    pub fn enumerate(&self, cap: u128) -> Result<EnumerateConfigs<'_>, SpaceError> {
        let cardinality = self.cardinality()?;
        if cardinality > cap {
            return Err(SpaceError::CapExceeded { cardinality, cap });
        }
        Ok(EnumerateConfigs {
            space: self,
            indices: vec![0; self.parameters.len()],
            remaining: cardinality,
        })
    }

    /// Builds the configuration at the given per-parameter option indices.
    pub fn config_at(&self, indices: &[u64]) -> Configuration {
        debug_assert_eq!(indices.len(), self.parameters.len());
        Configuration::from_values(
            self.parameters
                .iter()
                .zip(indices)
                .map(|(p, &i)| p.option_value(i))
                .collect(),
        )
    }

    /// Validates a raw name→value record into a well-typed configuration, or
    /// reports every violating field.
    pub fn validate(&self, fields: &[(&str, &str)]) -> Result<Configuration, ValidateError> {
        let mut issues = Vec::new();
        let mut values: Vec<Option<Value>> = vec![None; self.parameters.len()];
        for (name, raw) in fields {
            match self.parameters.iter().position(|p| p.name == *name) {
                Some(idx) => match self.parameters[idx].parse_value(raw) {
                    Ok(v) => {
                        if values[idx].is_some() {
                            issues.push(FieldIssue {
                                field: name.to_string(),
                                problem: "duplicate field".into(),
                            });
                        } else {
                            values[idx] = Some(v);
                        }
                    }
                    Err(problem) => issues.push(FieldIssue {
                        field: name.to_string(),
                        problem,
                    }),
                },
                None => issues.push(FieldIssue {
                    field: name.to_string(),
                    problem: "unknown parameter".into(),
                }),
            }
        }
        for (p, v) in self.parameters.iter().zip(&values) {
            if v.is_none() && !issues.iter().any(|i| i.field == p.name) {
                issues.push(FieldIssue {
                    field: p.name.clone(),
                    problem: "missing value".into(),
                });
            }
        }
        if issues.is_empty() {
            Ok(Configuration::from_values(
                values.into_iter().map(Option::unwrap).collect(),
            ))
        } else {
            Err(ValidateError { issues })
        }
    }

    /// Checks a pre-built configuration against this space.
    pub fn contains(&self, config: &Configuration) -> bool {
        config.values().len() == self.parameters.len()
            && self
                .parameters
                .iter()
                .zip(config.values())
                .all(|(p, v)| p.option_index(v).is_some())
    }

    /// Stable 64-bit fingerprint of the schema, used to pair datasets and
    /// fitted models with the space they were built from.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        for p in &self.parameters {
            h.write(p.name.as_bytes());
            match &p.kind {
                ParamKind::Integer { lo, hi } => {
                    h.write(b"i");
                    h.write(&lo.to_le_bytes());
                    h.write(&hi.to_le_bytes());
                }
                ParamKind::Real { lo, hi, grid } => {
                    h.write(b"r");
                    h.write(&lo.to_bits().to_le_bytes());
                    h.write(&hi.to_bits().to_le_bytes());
                    h.write(&grid.to_le_bytes());
                }
                ParamKind::Categorical { values } => {
                    h.write(b"c");
                    for v in values {
                        h.write(v.as_bytes());
                        h.write(b"\x1f");
                    }
                }
            }
            h.write(b"\x1e");
        }
        h.write(self.task_feature.name.as_bytes());
        match self.task_feature.kind {
            TaskKind::Integer { lo, hi } => {
                h.write(b"ti");
                h.write(&lo.to_le_bytes());
                h.write(&hi.to_le_bytes());
            }
            TaskKind::Real { lo, hi } => {
                h.write(b"tr");
                h.write(&lo.to_bits().to_le_bytes());
                h.write(&hi.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

/// FNV-1a, fixed here rather than `DefaultHasher` because fingerprints are
/// persisted in model files and must be stable across releases.
pub(crate) struct Fnv64(u64);

impl Fnv64 {
    pub(crate) fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// Odometer iterator over all configurations of a space.
#[derive(Debug)]
pub struct EnumerateConfigs<'a> {
    space: &'a ParameterSpace,
    indices: Vec<u64>,
    remaining: u128,
}

impl Iterator for EnumerateConfigs<'_> {
    type Item = Configuration;

    fn next(&mut self) -> Option<Configuration> {
        if self.remaining == 0 {
            return None;
        }
        let config = self.space.config_at(&self.indices);
        self.remaining -= 1;
        for pos in (0..self.indices.len()).rev() {
            self.indices[pos] += 1;
            if self.indices[pos] < self.space.parameters[pos].option_count() {
                break;
            }
            self.indices[pos] = 0;
        }
        Some(config)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = usize::try_from(self.remaining).unwrap_or(usize::MAX);
        (n, Some(n))
    }
}
