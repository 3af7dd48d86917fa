use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dcsat::attack::evaluate_model;
use dcsat::data::synthetic_dataset;
use dcsat::exec::Exec;
use dcsat::trustregion::oracle_inner_max_with;
use dcsat::{make_sampler, Activation, DenseMatrix, DenseNet};
use std::hint::black_box;

fn policies() -> Vec<(&'static str, Exec)> {
    let mut v = vec![("sequential", Exec::Sequential)];
    #[cfg(feature = "parallel")]
    v.push(("parallel", Exec::Parallel));
    v
}

fn attack(c: &mut Criterion) {
    let (data, z) = synthetic_dataset(8, 196, 32, 3).unwrap();
    let g = DenseNet::seeded(&[8, 50, 196], &[Activation::Sigmoid, Activation::Sigmoid], 1).unwrap();
    let phi = make_sampler(196, 0.6, 2).unwrap();
    let ys = data.sensed(&phi).unwrap();
    let mut group = c.benchmark_group("evaluate_model");
    group.sample_size(10);
    for (name, exec) in policies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(evaluate_model(&g, &phi, &z, &ys, 0.5, 512, 9, exec).unwrap()))
        });
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let p = DenseMatrix::from_fn(6, 5, |i, j| ((i * 5 + j) as f64 * 0.37).sin());
    let y = [1.0, -0.5, 0.25, 0.0, 2.0, 0.3];
    let mut group = c.benchmark_group("oracle_inner_max");
    for (name, exec) in policies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                black_box(oracle_inner_max_with(&p, &y, 1.0, 64, 4, Default::default(), exec).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, attack, oracle);
criterion_main!(benches);
