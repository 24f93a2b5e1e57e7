use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use obmreg_bench::fixture_pair;
use obmreg_core::diffmath::Tape;
use obmreg_core::losses::MinMode;
use obmreg_core::solver::{icp_baseline, register_iterative, IterationConfig};
use obmreg_core::{Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pipeline(c: &mut Criterion) {
    let pair = fixture_pair(256);
    let model = Model::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let (p, q) = (&pair.source, &pair.target);
    let mut group = c.benchmark_group("pipeline_n256");
    group.sample_size(20);

    group.bench_function("forward_backward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let bound = model.params.bind(&tape, true);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let fwd = model.forward(&tape, &bound, p, q, 0.5, &mut rng).unwrap();
            let (loss, _) = model.loss(&tape, &fwd, p, q, MinMode::Soft(1e4)).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
    group.bench_function("register_3_iters", |b| {
        let cfg = IterationConfig {
            n_iter: 3,
            ..IterationConfig::default()
        };
        b.iter(|| register_iterative(&model, p, q, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap())
    });
    group.bench_function("icp", |b| b.iter(|| icp_baseline(black_box(p), black_box(q), 50, 1e-10).unwrap()));
    group.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
