//! Sequential versus rayon throughput for the data-parallel hot paths.
//!
//! The sequential arm runs the same code inside a one-thread pool, which is
//! what the `parallel`-off build executes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPool;

use awdiff::denoiser::ArchitectureConfig;
use awdiff::metrics::{structure_preservation_report, CwSsimParams};
use awdiff::phantom::{generate_phantom, suite_params, PhantomParams};
use awdiff::training::{training_step, Batch, Dataset, TrainState, TrainingConfig};
use awdiff::wavelet::starlet_decompose;
use awdiff::{Image, SeededRng};

fn pools() -> Vec<(&'static str, ThreadPool)> {
    let build = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    vec![("sequential", build(1)), ("rayon", build(0))]
}

fn phantoms(n: usize, size: usize) -> Vec<Image> {
    let base = PhantomParams {
        width: size,
        height: size,
        ..Default::default()
    };
    (0..n)
        .map(|i| generate_phantom(&suite_params(&base, 9, i, 4)).unwrap().0)
        .collect()
}

fn bench_training_step(c: &mut Criterion) {
    let cfg = TrainingConfig {
        arch: ArchitectureConfig::tiny(),
        batch_size: 16,
        ..TrainingConfig::default()
    };
    let base = PhantomParams {
        width: 16,
        height: 16,
        ..Default::default()
    };
    let data = Dataset::phantoms(32, &base, 1, cfg.arch.scales, cfg.arch.embed_dim).unwrap();
    let sched = cfg.schedule().unwrap();
    let embedder = awdiff::conditioning::ToyImageEmbedder::with_dim(cfg.arch.embed_dim);
    let batch = Batch::draw(&data, &cfg, &mut SeededRng::new(2)).unwrap();
    let mut group = c.benchmark_group("training_step");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_batched(
                || TrainState::init(&cfg).unwrap(),
                |mut state| {
                    pool.install(|| training_step(&mut state, &data, &batch, &sched, &cfg, &embedder).unwrap())
                },
                criterion::BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn bench_starlet(c: &mut Criterion) {
    let img = phantoms(1, 256).remove(0);
    let mut group = c.benchmark_group("starlet_decompose_256");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| starlet_decompose(&img, 4).unwrap()))
        });
    }
    group.finish();
}

fn bench_report(c: &mut Criterion) {
    let originals = phantoms(16, 32);
    let generated: Vec<Image> = originals.iter().map(|x| x.roll(1, 0)).collect();
    let p = CwSsimParams::default();
    let mut group = c.benchmark_group("structure_report_16");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| structure_preservation_report(&originals, &generated, &p).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_training_step, bench_starlet, bench_report);
criterion_main!(benches);
