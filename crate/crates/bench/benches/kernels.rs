use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use volta_core::augment::{make_views, AugmentConfig};
use volta_core::numcore::{NdArray, Tape};
use volta_core::train::{TrainConfig, Trainer};
use volta_core::vit3d::{forward, ModelConfig, ModelParams};
use volta_core::volio::{generate_phantom, PhantomSpec};

fn matmul(c: &mut Criterion) {
    let a = NdArray::from_fn(&[64, 64], |i| (i % 7) as f64 * 0.1);
    let b = NdArray::from_fn(&[64, 256], |i| (i % 5) as f64 * 0.1);
    c.bench_function("matmul 64x64x256 forward+backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.param(a.clone());
            let w = tape.param(b.clone());
            let y = tape.matmul(x, w).unwrap();
            let s = tape.sum(y);
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn encoder(c: &mut Criterion) {
    let cfg = ModelConfig::desk();
    let params = ModelParams::init(&cfg, 0).unwrap();
    let volume = generate_phantom(&PhantomSpec::default()).unwrap().volume;
    c.bench_function("desk encoder forward 16^3", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let vars = params.to_tape(&mut tape, false);
            black_box(forward(&mut tape, &vars, &cfg, &volume.grid).unwrap());
        })
    });
}

fn train_step(c: &mut Criterion) {
    let model = ModelConfig::desk();
    let augment = AugmentConfig::default();
    let train = TrainConfig::default();
    let volume = generate_phantom(&PhantomSpec::default()).unwrap().volume;
    let views = make_views(&volume, &augment, 0).unwrap();
    let mut trainer = Trainer::new(&model, &train, 1_000_000).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("desk training step", |bench| bench.iter(|| black_box(trainer.step(&views).unwrap())));
    group.finish();
}

criterion_group!(benches, matmul, encoder, train_step);
criterion_main!(benches);
