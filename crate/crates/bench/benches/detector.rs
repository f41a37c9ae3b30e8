use criterion::{criterion_group, criterion_main, Criterion};
use ire_core::esom::{two_class_dataset, Detector, SomConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn train(c: &mut Criterion) {
    let data = two_class_dataset(2000, 4.0, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("50x80", |b| {
        b.iter(|| Detector::train(&data, &SomConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap())
    });
    g.finish();
}

fn classify(c: &mut Criterion) {
    let data = two_class_dataset(2000, 4.0, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
    let det = Detector::train(&data, &SomConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    c.bench_function("classify/1000", |b| {
        b.iter(|| data[..1000].iter().map(|s| det.classify(&s.features)).count())
    });
}

criterion_group!(benches, train, classify);
criterion_main!(benches);
