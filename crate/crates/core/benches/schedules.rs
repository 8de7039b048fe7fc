//! Sequential vs parallel schedules on the grid-shaped workloads.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use rose_core::exec::Schedule;
use rose_core::landscape::{interp_1d_with, surface_2d_with};
use rose_core::model::{init_params, Activation, DropoutSites, ModelSpec};
use rose_core::probe::{generate_probe_task, ProbeTaskSpec, SurfaceKind};

const SCHEDULES: [(&str, Schedule); 2] = [
    ("sequential", Schedule::Sequential),
    ("parallel", Schedule::Parallel),
];

fn setup() -> (
    ModelSpec,
    rose_core::ParamSet,
    rose_core::ParamSet,
    rose_core::data::LabeledSet,
) {
    let mut task = ProbeTaskSpec::new(SurfaceKind::Indicator, 1);
    task.train_size = 256;
    let (train, _) = generate_probe_task(&task).unwrap();
    let spec = ModelSpec {
        input_dim: task.input_dim(),
        hidden_dims: vec![32, 32],
        classes: 2,
        activation: Activation::Tanh,
        dropout_rate: 0.1,
        dropout_sites: DropoutSites::AfterEachHidden,
    };
    let a = init_params(&spec, 1).unwrap();
    let b = init_params(&spec, 2).unwrap();
    (spec, a, b, train)
}

fn landscapes(c: &mut Criterion) {
    let (spec, a, b, data) = setup();
    let mut group = c.benchmark_group("surface_2d");
    group.sample_size(10);
    for (name, schedule) in SCHEDULES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| surface_2d_with(&spec, &a, &data, 7, schedule).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("interp_1d");
    for (name, schedule) in SCHEDULES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| interp_1d_with(&spec, &a, &b, &data, schedule).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, landscapes);
criterion_main!(benches);
