use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stack_redundancy::parallel;
use stack_redundancy::similarity::{similarity_matrix, Metric};
use stack_redundancy::ActivationDump;

fn dump(layers: usize, n: usize, d: usize) -> ActivationDump {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layers = (0..layers)
        .map(|_| Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0)))
        .collect();
    ActivationDump::new(layers, None, None).unwrap()
}

fn similarity(c: &mut Criterion) {
    let dump = dump(12, 512, 64);
    let mut group = c.benchmark_group("similarity_matrix");
    group.sample_size(10);
    for metric in Metric::ALL {
        group.bench_with_input(BenchmarkId::new("parallel", metric), &metric, |b, &m| {
            b.iter(|| similarity_matrix(&dump, m, None).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", metric), &metric, |b, &m| {
            b.iter(|| parallel::sequential(|| similarity_matrix(&dump, m, None).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, similarity);
criterion_main!(benches);
