use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use dspn::trainer::{OptimizerKind, TrainConfig, Trainer};
use dspn::Objective;
use dspn_bench::Fixture;

const OBJECTIVE: Objective = Objective::Joint { lambda: 0.1 };

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for max_len in [8, 32, 128] {
        let fx = Fixture::new(256, max_len, 64);
        let review = &fx.corpus.reviews[0];
        group.throughput(Throughput::Elements(review.len() as u64));
        group.bench_with_input(BenchmarkId::from_parameter(max_len), review, |b, r| {
            b.iter(|| fx.model.forward(black_box(r)).unwrap())
        });
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let fx = Fixture::new(256, 32, 64);
    let mut group = c.benchmark_group("batch_gradient");
    for batch in [8, 32, 128] {
        let (reviews, labels) = fx.batch(batch);
        let negatives: Vec<Vec<usize>> = (0..batch).map(|i| vec![(i + 1) % batch; 4]).collect();
        let mut model = fx.model.clone();
        group.throughput(Throughput::Elements(batch as u64));
        group.bench_function(BenchmarkId::from_parameter(batch), |b| {
            b.iter(|| model.batch_gradient(&reviews, labels, &negatives, OBJECTIVE, 1.0, None).unwrap())
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let fx = Fixture::new(256, 32, 64);
    let (reviews, labels) = fx.batch(64);
    let mut group = c.benchmark_group("train_step");
    for workers in [1, 4] {
        let config = TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 1e-4,
            workers,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(fx.model.clone(), &config, 0).unwrap();
        group.bench_function(BenchmarkId::new("workers", workers), |b| {
            b.iter(|| trainer.step(&reviews, labels, OBJECTIVE).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward, backward, train_step);
criterion_main!(benches);
