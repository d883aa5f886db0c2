use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use evcharge_core::chain::ChainModel;
use evcharge_core::sim::{run_ensemble, SimConfig};
use evcharge_core::synthesis::{build_rate_table, RatePolicy, SynthesisSpec};
use std::hint::black_box;

struct Runner {
    name: &'static str,
    pool: Option<rayon::ThreadPool>,
}

impl Runner {
    fn run<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.pool {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }
}

// Without the `parallel` feature every path is already sequential, so the
// one-thread pool and the default pool measure the same code.
fn runners() -> Vec<Runner> {
    vec![
        Runner { name: "default_pool", pool: None },
        Runner {
            name: "one_thread",
            pool: Some(rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        },
    ]
}

fn rate_table(c: &mut Criterion) {
    let mut group = c.benchmark_group("build_rate_table");
    group.sample_size(10);
    let spec = SynthesisSpec::new(300, 1e-10, 0.01).unwrap();
    for r in runners() {
        group.bench_function(BenchmarkId::new(r.name, 300), |b| {
            b.iter(|| r.run(|| build_rate_table(black_box(&spec)).unwrap()))
        });
    }
    group.finish();
}

fn stationary(c: &mut Criterion) {
    let mut group = c.benchmark_group("stationary");
    group.sample_size(10);
    let spec = SynthesisSpec::new(200, 1e-6, 0.01).unwrap();
    let policy = RatePolicy::Table(build_rate_table(&spec).unwrap());
    for r in runners() {
        group.bench_function(BenchmarkId::new(r.name, 200), |b| {
            b.iter(|| {
                r.run(|| {
                    ChainModel::new(black_box(&policy), spec.mu_tau())
                        .unwrap()
                        .stationary(1e-10)
                        .unwrap()
                })
            })
        });
    }
    group.finish();
}

fn ensemble(c: &mut Criterion) {
    let mut group = c.benchmark_group("ensemble");
    group.sample_size(10);
    let spec = SynthesisSpec::new(50, 1e-2, 0.01).unwrap();
    let policy = RatePolicy::Table(build_rate_table(&spec).unwrap());
    let config = SimConfig::new(policy, spec.capacity(), spec.mu_tau(), 5_000, 16, 1).with_warmup(500);
    for r in runners() {
        group.bench_function(BenchmarkId::new(r.name, 16), |b| {
            b.iter(|| r.run(|| run_ensemble(black_box(&config)).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, rate_table, stationary, ensemble);
criterion_main!(benches);
