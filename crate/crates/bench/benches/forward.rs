use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use soundloc::model::{triplet_loss_and_grad, TripletInput};
use soundloc::{localize, LossWeights, Mechanism, TrainConfig, TwoStreamParams};
use soundloc_bench::{random_frame, random_wave};

fn toy(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let config = TrainConfig::toy(Mechanism::Cos);
    let params = TwoStreamParams::init(&config.model, &mut rng).unwrap();
    let frame = random_frame(&mut rng, 32, 32);
    let n = (config.window_s * config.sample_rate as f64).round() as usize;
    let pos = random_wave(&mut rng, n);
    let neg = random_wave(&mut rng, n);
    c.bench_function("toy localize", |b| {
        b.iter(|| localize(black_box(&params), black_box(&frame), black_box(&pos)).unwrap())
    });
    let input = TripletInput {
        frame: &frame,
        positive: &pos,
        negative: &neg,
        gt: None,
    };
    let weights = LossWeights::default();
    c.bench_function("toy triplet loss and gradient", |b| {
        b.iter(|| {
            let mut g = params.zeros_like();
            triplet_loss_and_grad(black_box(&params), black_box(&input), &weights, &mut g).unwrap();
            g
        })
    });
}

criterion_group!(benches, toy);
criterion_main!(benches);
