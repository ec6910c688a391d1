//! Shared fixtures for the benchmarks: a Syr2k-sized space and a fitted
//! model over mildly structured data.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use gctuner::dataset::{Dataset, TuningRecord};
use gctuner::space::{ParamKind, ParameterDef, ParameterSpace, TaskFeature, TaskKind};
use gctuner::CopulaModel;

/// Six parameters, 10,648 configurations.
pub fn bench_space() -> Arc<ParameterSpace> {
    let mut params: Vec<ParameterDef> = (0..3)
        .map(|i| ParameterDef {
            name: format!("tile{i}"),
            kind: ParamKind::Integer { lo: 0, hi: 10 },
        })
        .collect();
    for i in 0..3 {
        params.push(ParameterDef {
            name: format!("flag{i}"),
            kind: ParamKind::Categorical {
                values: vec!["on".into(), "off".into()],
            },
        });
    }
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

pub fn bench_dataset(space: &Arc<ParameterSpace>, rows: usize) -> Dataset {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let records: Vec<TuningRecord> = (0..rows)
        .map(|_| {
            let task = rng.random_range(0..3) as f64 * 30.0 + 15.0;
            let indices: Vec<u64> = space
                .tunables()
                .iter()
                .map(|p| rng.random_range(0..p.option_count()))
                .collect();
            let objective = indices
                .iter()
                .map(|&i| (i as f64 - task / 12.0).powi(2))
                .sum::<f64>()
                + rng.random::<f64>();
            TuningRecord {
                config: space.config_at(&indices),
                task_value: task,
                objective,
            }
        })
        .collect();
    Dataset::new(Arc::clone(space), records).unwrap()
}

pub fn bench_model(space: &Arc<ParameterSpace>) -> CopulaModel {
    let ds = bench_dataset(space, 600).quantile_filter(0.9).unwrap();
    CopulaModel::fit_seeded(&ds, Some(0.9), 2).unwrap()
}
