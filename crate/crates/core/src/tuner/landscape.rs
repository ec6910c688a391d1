//! Synthetic tuning landscapes: analytic objectives with known optima, small
//! enough to brute-force, used as desk-scale stand-ins for compiled kernels.
//!
//! Each family exercises a different transfer mechanism. The bowl family
//! moves a smooth optimum with the task; the switch family flips the best
//! category at a task boundary; the rugged family overlays a non-separable
//! high-frequency ripple on a moving bowl, so nearby configurations reorder.
//! Targets `sm` and `ml` interpolate between the source tasks and `xl`
//! extrapolates beyond them.

use std::sync::Arc;

use crate::space::{
    Configuration, Fnv64, ParamKind, ParameterDef, ParameterSpace, TaskFeature, TaskKind, Value,
};
use crate::tuner::evaluator::{EvalFailure, Evaluator};

/// Task values the source datasets are collected at.
pub const SOURCE_TASKS: [f64; 3] = [40.0, 80.0, 120.0];

/// Named transfer targets: two interpolations and one extrapolation.
pub const TARGET_TASKS: [(&str, f64); 3] = [("sm", 60.0), ("ml", 100.0), ("xl", 160.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Landscape {
    /// Task-scaled quadratic bowl over two integers with a categorical gate.
    ScaledBowl,
    /// The best category flips at a task boundary; threads track the task.
    CategoricalSwitch,
    /// Moving bowl plus a non-separable sinusoidal interaction ripple.
    RuggedInteraction,
}

impl Landscape {
    pub const ALL: [Landscape; 3] = [
        Landscape::ScaledBowl,
        Landscape::CategoricalSwitch,
        Landscape::RuggedInteraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Landscape::ScaledBowl => "scaled-bowl",
            Landscape::CategoricalSwitch => "categorical-switch",
            Landscape::RuggedInteraction => "rugged-interaction",
        }
    }

    pub fn by_name(name: &str) -> Option<Landscape> {
        Self::ALL.into_iter().find(|l| l.name() == name)
    }

    pub fn space(self) -> Arc<ParameterSpace> {
        let task = TaskFeature {
            name: "size".into(),
            kind: TaskKind::Real { lo: 1.0, hi: 200.0 },
        };
        let int = |name: &str, lo: i64, hi: i64| ParameterDef {
            name: name.into(),
            kind: ParamKind::Integer { lo, hi },
        };
        let cat = |name: &str, values: &[&str]| ParameterDef {
            name: name.into(),
            kind: ParamKind::Categorical {
                values: values.iter().map(|v| v.to_string()).collect(),
            },
        };
        let params = match self {
            Landscape::ScaledBowl => vec![
                int("tile_x", 0, 31),
                int("tile_y", 0, 31),
                cat("packed", &["off", "on"]),
            ],
            Landscape::CategoricalSwitch => vec![
                cat("algo", &["scan", "block"]),
                int("threads", 1, 32),
                cat("sched", &["static", "dynamic", "guided"]),
                int("unroll", 0, 7),
            ],
            Landscape::RuggedInteraction => vec![
                int("x", 0, 31),
                int("y", 0, 31),
                cat("mode", &["split", "fused"]),
            ],
        };
        Arc::new(ParameterSpace::new(params, task).expect("landscape schemas are valid"))
    }

    /// The untuned reference point: every parameter at its first option.
    pub fn default_config(self) -> Configuration {
        let space = self.space();
        let indices = vec![0u64; space.tunables().len()];
        space.config_at(&indices)
    }

    /// The analytic objective (lower is better). Pure and deterministic; a
    /// hash-based jitter far below any structural term makes all
    /// configurations totally ordered, so ranks and optima are unique.
    pub fn objective(self, config: &Configuration, task: f64) -> f64 {
        let v = config.values();
        let num = |i: usize| v[i].as_f64().expect("numeric by schema");
        let cat = |i: usize| match &v[i] {
            Value::Cat(c) => c.as_str(),
            _ => unreachable!("categorical by schema"),
        };
        let s = task;
        let shape = match self {
            Landscape::ScaledBowl => {
                let xa = 31.0 * s / 200.0;
                let ya = 31.0 * (1.0 - s / 200.0);
                let bowl = sq((num(0) - xa) / 31.0) + sq((num(1) - ya) / 31.0);
                let gate = if cat(2) == "on" { 0.0 } else { 0.6 };
                bowl + gate
            }
            Landscape::CategoricalSwitch => {
                let best_algo = if s < 100.0 { "scan" } else { "block" };
                let algo = if cat(0) == best_algo { 0.0 } else { 0.05 };
                let ta = 4.0 + 24.0 * s / 200.0;
                let threads = 2.2 * sq((num(1) - ta) / 31.0);
                let sched = match cat(2) {
                    "dynamic" => 0.0,
                    "static" => 0.8,
                    _ => 1.0,
                };
                let unroll = 0.04 * sq((num(3) - 4.0) / 4.0);
                algo + threads + sched + unroll
            }
            Landscape::RuggedInteraction => {
                let xa = 31.0 * (0.15 + 0.7 * s / 200.0);
                let ya = 31.0 * (0.9 - 0.6 * s / 200.0);
                let bowl = sq((num(0) - xa) / 31.0) + sq((num(1) - ya) / 31.0);
                let ripple = 0.02 * (1.9 * num(0) + 2.7 * num(1)).sin().powi(2);
                let mode = if cat(2) == "fused" { 0.0 } else { 0.7 };
                bowl + ripple + mode
            }
        };
        s * (1.0 + shape) + s * 1e-7 * jitter(config)
    }

    /// Every configuration's objective at `task`, sorted ascending.
    pub fn brute_force(self, task: f64) -> Vec<f64> {
        let space = self.space();
        let mut objectives: Vec<f64> = space
            .enumerate(1 << 20)
            .expect("landscape spaces are small")
            .map(|c| self.objective(&c, task))
            .collect();
        objectives.sort_by(|a, b| a.partial_cmp(b).unwrap());
        objectives
    }
}

fn sq(x: f64) -> f64 {
    x * x
}

/// Stable per-configuration tie-breaker in [0, 1).
fn jitter(config: &Configuration) -> f64 {
    let mut h = Fnv64::new();
    for value in config.values() {
        match value {
            Value::Int(v) => h.write(&v.to_le_bytes()),
            Value::Real(v) => h.write(&v.to_bits().to_le_bytes()),
            Value::Cat(v) => h.write(v.as_bytes()),
        }
        h.write(b"|");
    }
    (h.finish() >> 11) as f64 / (1u64 << 53) as f64
}

/// Evaluator over a synthetic landscape.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticEvaluator {
    pub landscape: Landscape,
}

impl SyntheticEvaluator {
    pub fn new(landscape: Landscape) -> Self {
        Self { landscape }
    }
}

impl Evaluator for SyntheticEvaluator {
    fn evaluate(&mut self, config: &Configuration, task_value: f64) -> Result<f64, EvalFailure> {
        Ok(self.landscape.objective(config, task_value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for l in Landscape::ALL {
            assert_eq!(Landscape::by_name(l.name()), Some(l));
        }
        assert_eq!(Landscape::by_name("nope"), None);
    }

    #[test]
    fn spaces_are_brute_forceable() {
        for l in Landscape::ALL {
            let n = l.space().cardinality().unwrap();
            assert!(n <= 10_000, "{}: |C| = {n}", l.name());
            assert_eq!(l.brute_force(60.0).len() as u128, n);
        }
    }

    #[test]
    fn objectives_are_deterministic_and_distinct() {
        for l in Landscape::ALL {
            let space = l.space();
            let objs = l.brute_force(60.0);
            for w in objs.windows(2) {
                assert!(w[0] < w[1], "{}: tied objectives {w:?}", l.name());
            }
            let c = space.config_at(&vec![0; space.tunables().len()]);
            assert_eq!(l.objective(&c, 60.0), l.objective(&c, 60.0));
        }
    }

    #[test]
    fn optimum_moves_with_the_task() {
        let l = Landscape::ScaledBowl;
        let space = l.space();
        let best_at = |task: f64| -> Configuration {
            space
                .enumerate(1 << 20)
                .unwrap()
                .min_by(|a, b| {
                    l.objective(a, task)
                        .partial_cmp(&l.objective(b, task))
                        .unwrap()
                })
                .unwrap()
        };
        let low = best_at(20.0);
        let high = best_at(180.0);
        assert!(
            low.values()[0].as_f64().unwrap() < high.values()[0].as_f64().unwrap(),
            "tile_x optimum should grow with the task"
        );
    }

    #[test]
    fn switch_flips_at_the_boundary() {
        let l = Landscape::CategoricalSwitch;
        let space = l.space();
        let best_algo = |task: f64| -> String {
            let best = space
                .enumerate(1 << 20)
                .unwrap()
                .min_by(|a, b| {
                    l.objective(a, task)
                        .partial_cmp(&l.objective(b, task))
                        .unwrap()
                })
                .unwrap();
            best.get(&space, "algo").unwrap().to_string()
        };
        assert_eq!(best_algo(60.0), "scan");
        assert_eq!(best_algo(160.0), "block");
    }

    #[test]
    fn default_config_is_not_optimal() {
        for l in Landscape::ALL {
            let best = l.brute_force(60.0)[0];
            let default = l.objective(&l.default_config(), 60.0);
            assert!(
                default > best,
                "{}: default should leave headroom",
                l.name()
            );
        }
    }
}
