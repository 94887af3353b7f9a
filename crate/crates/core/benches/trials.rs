use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cdet::sim::{run_trials, Model, Regime, SimulationSpec};
use cdet::{ExecMode, TestMethod};

fn trials(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_trials");
    group.sample_size(10);
    for exec in [ExecMode::Sequential, ExecMode::Parallel] {
        let mut spec = SimulationSpec::new(Model::M1, Regime::Alternative, 500, 500, TestMethod::GcaLlr)
            .with_trials(8)
            .with_exec(exec);
        spec.settings.mdn_training.max_epochs = 50;
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &spec, |bench, spec| {
            bench.iter(|| run_trials(spec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, trials);
criterion_main!(benches);
