use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fogcoop::optimizer::pareto_scan;
use fogcoop::sim::{simulate_many, SimConfig};
use fogcoop::{CoopVector, Exec, LoadVector};

const EXECUTORS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn pareto(c: &mut Criterion) {
    let loads = LoadVector::new(vec![0.9, 0.8]).unwrap();
    let mut group = c.benchmark_group("pareto_scan");
    for grid in [21, 101] {
        for (name, exec) in EXECUTORS {
            group.bench_with_input(BenchmarkId::new(name, grid), &grid, |b, &grid| {
                b.iter(|| pareto_scan(&loads, grid, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn seeds(c: &mut Criterion) {
    let loads = LoadVector::new(vec![0.9, 0.8, 0.7, 0.6]).unwrap();
    let coop = CoopVector::new(vec![1.0, 0.77, 0.58, 0.41]).unwrap();
    let configs: Vec<SimConfig> = (0..8)
        .map(|seed| {
            let mut cfg = SimConfig::new(loads.clone(), coop.clone());
            cfg.seed = seed;
            cfg.max_arrivals = 100_000;
            cfg
        })
        .collect();
    let mut group = c.benchmark_group("simulate_many");
    group.sample_size(10);
    for (name, exec) in EXECUTORS {
        group.bench_function(name, |b| b.iter(|| simulate_many(&configs, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, pareto, seeds);
criterion_main!(benches);
