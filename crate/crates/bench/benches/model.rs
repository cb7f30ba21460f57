use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tinyvim_core::backbone::{build_model, fuse_reparam, Model, ModelConfig, Variant};
use tinyvim_core::laplace::MixerMode;
use tinyvim_core::nn::{Ctx, Mode};
use tinyvim_core::{Tape, Tensor};

fn toy_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn(vec![8, 3, 32, 32], &mut rng);
    let mut group = c.benchmark_group("toy_forward");
    for mode in [
        MixerMode::LowOnly,
        MixerMode::LowHigh,
        MixerMode::Baseline,
        MixerMode::ConvOnly,
    ] {
        let mut cfg = ModelConfig::variant(Variant::Toy, 10);
        cfg.mixer_mode = mode;
        let model = Model::<f32>::new(cfg, 0).unwrap();
        group.bench_function(mode.name(), |b| b.iter(|| model.predict(&x).unwrap()));
    }
    let mut fused = build_model::<f32>(Variant::Toy, 10, 0).unwrap();
    fuse_reparam(&mut fused);
    group.bench_function("low-only-fused", |b| b.iter(|| fused.predict(&x).unwrap()));
    group.finish();
}

fn toy_train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::randn(vec![32, 3, 32, 32], &mut rng);
    let labels: Vec<usize> = (0..32).map(|i| i % 10).collect();
    let model = build_model::<f32>(Variant::Toy, 10, 0).unwrap();
    c.bench_function("toy_forward_backward_b32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, Mode::Train);
            let xv = ctx.tape.constant(x.clone());
            let out = model.forward(&mut ctx, xv).unwrap();
            let loss = ctx.tape.cross_entropy(out.logits, &labels).unwrap();
            ctx.tape.backward(loss).unwrap()
        })
    });
}

fn s_variant_inference(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f32>::randn(vec![1, 3, 224, 224], &mut rng);
    let mut model = build_model::<f32>(Variant::S, 1000, 0).unwrap();
    fuse_reparam(&mut model);
    let mut group = c.benchmark_group("s_variant");
    group.sample_size(10);
    group.bench_function("fused_224", |b| b.iter(|| model.predict(&x).unwrap()));
    group.finish();
}

criterion_group!(benches, toy_forward, toy_train_step, s_variant_inference);
criterion_main!(benches);
