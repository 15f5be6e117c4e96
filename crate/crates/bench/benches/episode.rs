use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use boxttt_bench::{engine, image, toy_pair};
use boxttt_core::geometry::serialize_box;
use boxttt_core::{box_loss, crop_and_pad, init_prompt, run_episode, BoundingBox, PromptRole};

fn crop(c: &mut Criterion) {
    let img = image(224);
    let b = BoundingBox::new(40, 60, 180, 200).unwrap();
    c.bench_function("crop_and_pad 224", |bench| {
        bench.iter(|| crop_and_pad(black_box(&img), black_box(&b), (224, 224)).unwrap())
    });
}

fn box_gradient(c: &mut Criterion) {
    let (g, _) = toy_pair(1);
    let img = image(32);
    let p = init_prompt(PromptRole::Evidence, 24, 8).unwrap();
    let target = serialize_box(&BoundingBox::new(3, 4, 20, 28).unwrap()).token_ids;
    c.bench_function("box_loss + gradient", |bench| {
        bench.iter(|| box_loss(&g, black_box(&img), "where", &p, &target, 32).unwrap())
    });
}

fn one_epoch(c: &mut Criterion) {
    let (g, f) = toy_pair(2);
    let img = image(32);
    let cfg = engine(1);
    c.bench_function("episode, 1 mini-epoch", |bench| {
        bench.iter(|| run_episode(black_box(&img), "what organ is shown", &g, &f, &cfg).unwrap())
    });
}

criterion_group!(benches, crop, box_gradient, one_epoch);
criterion_main!(benches);
