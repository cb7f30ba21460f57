use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tinyvim_core::ssm::{s6_forward, selective_scan, S6};
use tinyvim_core::Tensor;

fn scan_lengths(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (e, n) = (32, 16);
    let params = S6::<f64>::new(e, n, 2, true, &mut rng).snapshot();
    let mut group = c.benchmark_group("s6_forward");
    for len in [1024, 2048, 4096] {
        let x = Tensor::<f64>::randn(vec![len, e], &mut rng);
        group.throughput(Throughput::Elements(len as u64));
        group.bench_with_input(BenchmarkId::from_parameter(len), &x, |b, x| {
            b.iter(|| s6_forward(x, &params).unwrap())
        });
    }
    group.finish();
}

fn fused_kernel(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (batch, len, e, n) = (4, 256, 64, 16);
    let u = Tensor::<f32>::randn(vec![batch, len, e], &mut rng);
    let delta = Tensor::<f32>::uniform(vec![batch, len, e], 0.001, 0.1, &mut rng);
    let a_log = Tensor::<f32>::uniform(vec![e, n], 0.0, 2.0, &mut rng);
    let bm = Tensor::<f32>::randn(vec![batch, len, n], &mut rng);
    let cm = Tensor::<f32>::randn(vec![batch, len, n], &mut rng);
    let d = Tensor::<f32>::ones(vec![e]);
    c.bench_function("selective_scan_b4_l256_e64", |b| {
        b.iter(|| selective_scan(&u, &delta, &a_log, &bm, &cm, Some(&d)).unwrap())
    });
}

criterion_group!(benches, scan_lengths, fused_kernel);
criterion_main!(benches);
