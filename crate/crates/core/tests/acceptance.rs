//! The ten acceptance criteria, run in order by one test so timings are not disturbed by
//! concurrently running tests. Each criterion prints one PASS/FAIL line.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinyvim_core::backbone::{
    build_model, count_macs, count_params, decode_weights, effective_ratios, encode_weights,
    fuse_reparam, load_weights, save_weights, Model, ModelConfig, Variant, ALPHAS, POOL_RATIOS,
};
use tinyvim_core::gradcheck::{check_gradients, check_param_gradients, GradCheck, ParamProbeOpts};
use tinyvim_core::harness::{bench_scan, scaling_ratios, train_toy, BenchConfig, TrainConfig};
use tinyvim_core::laplace::{laplace_decompose, LaplaceMixer, MixerConfig, MixerMode};
use tinyvim_core::nn::{Ctx, Mode, Module, RepDw};
use tinyvim_core::ops::{upsample_nearest, Conv2dOpts};
use tinyvim_core::spectral::{fft2d, low_freq_energy_ratio};
use tinyvim_core::ssm::{
    ssm_conv_apply, ssm_kernel, ssm_scan_sequential, zoh, DiscreteSsm, Ss2dConfig, S6,
};
use tinyvim_core::{Tape, Tensor, Var};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget_s: f64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < budget_s, || {
        format!(
            "{what} took {:.2} s, budget {budget_s} s",
            elapsed.as_secs_f64()
        )
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Randomizes every batch-norm buffer and affine pair so fusion is exercised on non-trivial statistics.
fn perturb_batch_norms<T: tinyvim_core::Scalar>(m: &mut impl Module<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.visit_mut("", &mut |name, p| {
        let (lo, hi) = if name.ends_with("running_var") || name.ends_with("gamma") {
            (0.5, 1.5)
        } else if name.ends_with("running_mean") || name.ends_with("beta") {
            (-0.2, 0.2)
        } else {
            return;
        };
        for v in p.value.data_mut() {
            *v = T::lit(rng.random_range(lo..hi));
        }
    });
}

// 1 ---------------------------------------------------------------------------------------

/// `e^z` and `φ(z) = (e^z - 1)/z` for `z ≤ 0` from positive-term series only:
/// `e^z = 1 / Σ (-z)^k/k!` and `φ(z) = e^z · Σ (-z)^k/(k+1)!`.
fn series_oracle(z: f64) -> (f64, f64) {
    let y = -z;
    let (mut e, mut p) = (0.0, 0.0);
    let mut term = 1.0; // y^k / k!
    for k in 0..200 {
        e += term;
        p += term / (k + 1) as f64;
        term *= y / (k + 1) as f64;
        if term < 1e-30 * e {
            break;
        }
    }
    let ez = 1.0 / e;
    (ez, ez * p)
}

fn zoh_correctness() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut tiny = 0;
    for i in 0..10_000 {
        // every fourth triple is forced into the |ΔA| < 1e-4 regime
        let delta = if i % 4 == 0 {
            10f64.powf(rng.random_range(-9.0..-4.5))
        } else {
            10f64.powf(rng.random_range(-4.0..0.0))
        };
        let a = -10f64.powf(rng.random_range(-2.0..0.8));
        let b = rng.random_range(-2.0..2.0);
        if (delta * a).abs() < 1e-4 {
            tiny += 1;
        }
        let (a_bar, b_bar) = zoh(a, b, delta);
        let (ez, phi) = series_oracle(delta * a);
        worst = worst.max(rel(a_bar, ez)).max(rel(b_bar, delta * phi * b));
    }
    let (half, _) = zoh(-1.0, 1.0, std::f64::consts::LN_2);
    let elapsed = t.elapsed();
    ensure(worst <= 1e-12, || {
        format!("max relative error {worst:e} > 1e-12")
    })?;
    ensure(tiny >= 2000, || {
        format!("only {tiny} triples with |ΔA| < 1e-4")
    })?;
    ensure((half - 0.5).abs() <= 1e-15, || {
        format!("Ā(ln 2, -1) = {half:.17}")
    })?;
    within(elapsed, 1.0, "ZOH check")?;
    Ok(format!(
        "max rel err {worst:.1e} over 10^4 triples ({tiny} tiny), Ā(ln2,-1)=0.5"
    ))
}

// 2 ---------------------------------------------------------------------------------------

fn scan_equals_convolution() -> Outcome {
    let t = Instant::now();
    let (e, n) = (3, 4);
    let mut worst: f64 = 0.0;
    for &len in &[1usize, 2, 16, 64, 128] {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * len as u64 + seed);
            let delta = rng.random_range(0.01..0.5);
            let mut a_bar = Vec::new();
            let mut b_bar = Vec::new();
            for _ in 0..e * n {
                let (ab, bb) = zoh(
                    -rng.random_range(0.1..4.0),
                    rng.random_range(-1.0..1.0),
                    delta,
                );
                a_bar.push(ab);
                b_bar.push(bb);
            }
            let c: Vec<f64> = (0..e * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d: Vec<f64> = (0..e).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ssm = DiscreteSsm::time_invariant(e, n, a_bar, b_bar, c, Some(d.clone()))
                .map_err(|x| x.to_string())?;
            let x = Tensor::<f64>::randn(vec![len, e], &mut rng);
            let seq = ssm_scan_sequential(&ssm, &x).map_err(|x| x.to_string())?;
            let kernel = ssm_kernel(&ssm, len).map_err(|x| x.to_string())?;
            let conv = ssm_conv_apply(&kernel, &x, Some(&d)).map_err(|x| x.to_string())?;
            let err = seq.max_abs_diff(&conv) / seq.max_abs().max(1e-300);
            worst = worst.max(err);
        }
    }
    let elapsed = t.elapsed();
    ensure(worst <= 1e-10, || {
        format!("relative discrepancy {worst:e} > 1e-10")
    })?;
    within(elapsed, 10.0, "scan/convolution check")?;
    Ok(format!(
        "max rel diff {worst:.1e} over 5 lengths x 50 seeds"
    ))
}

// 3 ---------------------------------------------------------------------------------------

fn laplace_identity() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let r = [1, 2, 4, 8][i % 4];
        let (h, w) = (8 * rng.random_range(1..4), 8 * rng.random_range(1..4));
        let x = Tensor::<f64>::randn(
            vec![rng.random_range(1..3), rng.random_range(1..5), h, w],
            &mut rng,
        );
        let (low, high) = laplace_decompose(&x, r).map_err(|e| e.to_string())?;
        let back = high
            .add(&upsample_nearest(&low, r).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        worst = worst.max(back.max_abs_diff(&x));
    }
    let elapsed = t.elapsed();
    ensure(worst <= 1e-12, || {
        format!("reconstruction error {worst:e} > 1e-12")
    })?;
    within(elapsed, 5.0, "Laplace check")?;
    Ok(format!(
        "max |X_lh + Up(X_ll) - X_l| = {worst:.1e} over 100 tensors, r in 1,2,4,8"
    ))
}

// 4 ---------------------------------------------------------------------------------------

fn eval_forward<T: tinyvim_core::Scalar>(rep: &RepDw<T>, x: &Tensor<T>) -> Tensor<T> {
    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, Mode::Eval);
    let xv = ctx.tape.constant(x.clone());
    let y = rep.forward(&mut ctx, xv).unwrap();
    tape.value(y).clone()
}

fn reparameterization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for stride in [1, 2] {
        let mut rep = RepDw::<f64>::new(6, stride, &mut rng);
        perturb_batch_norms(&mut rep, 40 + stride as u64);
        let inputs: Vec<Tensor<f64>> = (0..50)
            .map(|_| Tensor::randn(vec![2, 6, 8, 8], &mut rng))
            .collect();
        let before: Vec<Tensor<f64>> = inputs.iter().map(|x| eval_forward(&rep, x)).collect();
        ensure(rep.fuse(), || "first fusion reported no change".into())?;
        let snapshot = encode_weights(&rep).map_err(|e| e.to_string())?;
        ensure(!rep.fuse(), || "second fusion reported a change".into())?;
        ensure(
            encode_weights(&rep).map_err(|e| e.to_string())? == snapshot,
            || "second fusion changed weights".into(),
        )?;
        for (x, y) in inputs.iter().zip(&before) {
            worst = worst.max(eval_forward(&rep, x).max_abs_diff(y));
        }
    }
    ensure(worst <= 1e-10, || {
        format!("fused block differs by {worst:e} > 1e-10")
    })?;

    let mut model = build_model::<f32>(Variant::S, 1000, 4).map_err(|e| e.to_string())?;
    perturb_batch_norms(&mut model, 44);
    let x = Tensor::<f32>::randn(vec![1, 3, 224, 224], &mut rng);
    let unfused = model.predict(&x).map_err(|e| e.to_string())?;
    ensure(fuse_reparam(&mut model), || {
        "model fusion reported no change".into()
    })?;
    ensure(!fuse_reparam(&mut model), || {
        "model fusion not idempotent".into()
    })?;
    let fused = model.predict(&x).map_err(|e| e.to_string())?;
    let model_diff = unfused.max_abs_diff(&fused) as f64;
    ensure(model_diff <= 1e-4, || {
        format!("S model fused logits differ by {model_diff:e} > 1e-4")
    })?;
    Ok(format!(
        "block max diff {worst:.1e} (100 inputs, f64), S model logits diff {model_diff:.1e} (f32), idempotent"
    ))
}

// 5 ---------------------------------------------------------------------------------------

/// `Σ w ⊙ y` with fixed pseudo-random weights so every output element matters.
fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> tinyvim_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(t.dims(y).to_vec(), -1.0, 1.0, &mut rng);
    let wv = t.constant(w);
    let p = t.mul(y, wv)?;
    t.sum(p)
}

type LossFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> tinyvim_core::Result<Var>>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, LossFn)> {
    let x4 = |rng: &mut ChaCha8Rng, d: [usize; 4]| Tensor::<f64>::randn(d.to_vec(), rng);
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, LossFn)> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($input:expr),*], |$t:ident, $v:ident| $body:expr) => {
            cases.push(($name, vec![$($input),*], Box::new(move |$t: &mut Tape<f64>, $v: &[Var]| {
                let y = $body?;
                weighted_sum($t, y, 99)
            })));
        };
    }
    case!(
        "add",
        [x4(rng, [2, 3, 2, 2]), x4(rng, [2, 3, 2, 2])],
        |t, v| t.add(v[0], v[1])
    );
    case!(
        "sub",
        [x4(rng, [2, 3, 2, 2]), x4(rng, [2, 3, 2, 2])],
        |t, v| t.sub(v[0], v[1])
    );
    case!(
        "mul",
        [x4(rng, [2, 3, 2, 2]), x4(rng, [2, 3, 2, 2])],
        |t, v| t.mul(v[0], v[1])
    );
    case!("scale", [x4(rng, [1, 2, 3, 3])], |t, v| t.scale(v[0], -1.7));
    case!("mean", [x4(rng, [1, 2, 3, 3])], |t, v| t.mean(v[0]));
    case!("reshape", [x4(rng, [1, 2, 3, 3])], |t, v| t
        .reshape(v[0], vec![2, 9]));
    case!("gelu", [x4(rng, [1, 2, 3, 3])], |t, v| t.gelu(v[0]));
    case!("silu", [x4(rng, [1, 2, 3, 3])], |t, v| t.silu(v[0]));
    case!("softplus", [x4(rng, [1, 2, 3, 3])], |t, v| t.softplus(v[0]));
    case!(
        "conv2d_dense",
        [
            x4(rng, [2, 3, 5, 5]),
            x4(rng, [4, 3, 3, 3]),
            Tensor::randn(vec![4], rng)
        ],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dOpts::new(1, 1, 1))
    );
    case!(
        "conv2d_strided",
        [x4(rng, [2, 2, 6, 6]), x4(rng, [3, 2, 3, 3])],
        |t, v| t.conv2d(v[0], v[1], None, Conv2dOpts::new(2, 1, 1))
    );
    case!(
        "conv2d_depthwise",
        [x4(rng, [2, 4, 5, 5]), x4(rng, [4, 1, 3, 3])],
        |t, v| t.conv2d(v[0], v[1], None, Conv2dOpts::new(1, 1, 4))
    );
    case!(
        "conv2d_pointwise",
        [x4(rng, [2, 3, 3, 3]), x4(rng, [5, 3, 1, 1])],
        |t, v| t.conv2d(v[0], v[1], None, Conv2dOpts::pointwise())
    );
    case!("avg_pool2d", [x4(rng, [1, 2, 4, 4])], |t, v| t
        .avg_pool2d(v[0], 2));
    case!("upsample_nearest", [x4(rng, [1, 2, 2, 2])], |t, v| t
        .upsample_nearest(v[0], 3));
    case!(
        "linear",
        [
            Tensor::randn(vec![3, 4], rng),
            Tensor::randn(vec![5, 4], rng),
            Tensor::randn(vec![5], rng)
        ],
        |t, v| t.linear(v[0], v[1], Some(v[2]))
    );
    case!(
        "layer_norm",
        [
            x4(rng, [2, 4, 2, 2]),
            Tensor::randn(vec![4], rng),
            Tensor::randn(vec![4], rng)
        ],
        |t, v| t.layer_norm_channels(v[0], v[1], v[2], 1e-5)
    );
    case!(
        "batch_norm_train",
        [
            x4(rng, [3, 2, 2, 2]),
            Tensor::randn(vec![2], rng),
            Tensor::randn(vec![2], rng)
        ],
        |t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|r| r.0)
    );
    let (rm, rv) = (
        Tensor::randn(vec![2], rng),
        Tensor::uniform(vec![2], 0.5, 1.5, rng),
    );
    case!(
        "batch_norm_eval",
        [
            x4(rng, [2, 2, 3, 3]),
            Tensor::randn(vec![2], rng),
            Tensor::randn(vec![2], rng)
        ],
        |t, v| t.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)
    );
    case!("slice_channels", [x4(rng, [2, 5, 2, 2])], |t, v| t
        .slice_channels(v[0], 1, 4));
    case!(
        "concat_channels",
        [x4(rng, [2, 2, 2, 2]), x4(rng, [2, 3, 2, 2])],
        |t, v| t.concat_channels(&[v[0], v[1]])
    );
    case!("global_avg_pool", [x4(rng, [2, 3, 3, 3])], |t, v| t
        .global_avg_pool(v[0]));
    cases.push((
        "cross_entropy",
        vec![Tensor::randn(vec![4, 5], rng)],
        Box::new(|t: &mut Tape<f64>, v: &[Var]| t.cross_entropy(v[0], &[0, 3, 4, 1])),
    ));
    case!("cross_scan", [x4(rng, [2, 3, 2, 3])], |t, v| t
        .cross_scan(v[0]));
    case!(
        "cross_merge",
        [Tensor::randn(vec![4, 6, 3], rng)],
        |t, v| t.cross_merge(v[0], 2, 3)
    );
    case!("laplace_decompose", [x4(rng, [1, 2, 4, 4])], |t, v| t
        .laplace_decompose(v[0], 2)
        .and_then(|(low, high)| {
            let up = t.upsample_nearest(low, 2)?;
            let s = t.scale(up, 0.7)?;
            t.add(s, high)
        }));
    let (b, l, e, n) = (2, 5, 3, 4);
    case!(
        "selective_scan",
        [
            Tensor::randn(vec![b, l, e], rng),
            Tensor::uniform(vec![b, l, e], 0.05, 0.5, rng),
            Tensor::uniform(vec![e, n], -0.5, 1.0, rng),
            Tensor::randn(vec![b, l, n], rng),
            Tensor::randn(vec![b, l, n], rng),
            Tensor::randn(vec![e], rng)
        ],
        |t, v| t.selective_scan(v[0], v[1], v[2], v[3], v[4], Some(v[5]))
    );
    cases
}

fn toy_loss_gradients() -> Result<GradCheck, String> {
    let model = build_model::<f64>(Variant::Toy, 10, 5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let x = Tensor::<f64>::randn(vec![4, 3, 32, 32], &mut rng);
    let labels = [1usize, 7, 3, 9];
    // 10 distinct params, every other one inside an SS2D block
    let opts = ParamProbeOpts {
        probes: 10,
        step: 1e-5,
        seed: 56,
        mode: Mode::Train,
        min_abs: 1e-4,
        groups: &["ss2d", ""],
    };
    check_param_gradients(&model, &opts, |m: &Model<f64>, ctx| {
        let xv = ctx.tape.constant(x.clone());
        let out = m.forward(ctx, xv)?;
        ctx.tape.cross_entropy(out.logits, &labels)
    })
    .map_err(|e| e.to_string())
}

fn s6_loss_gradients() -> Result<GradCheck, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let s6 = S6::<f64>::new(6, 4, 2, true, &mut rng);
    let u = Tensor::<f64>::randn(vec![2, 12, 6], &mut rng);
    let w = Tensor::<f64>::randn(vec![2, 12, 6], &mut rng);
    let opts = ParamProbeOpts {
        probes: 7,
        step: 1e-5,
        seed: 58,
        mode: Mode::Train,
        min_abs: 1e-3,
        groups: &[""],
    };
    check_param_gradients(&s6, &opts, |m: &S6<f64>, ctx| {
        let uv = ctx.tape.constant(u.clone());
        let y = m.forward(ctx, uv)?;
        let wv = ctx.tape.constant(w.clone());
        let yw = ctx.tape.mul(y, wv)?;
        ctx.tape.sum(yw)
    })
    .map_err(|e| e.to_string())
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = ("", 0.0f64);
    let cases = op_cases(&mut rng);
    let count = cases.len();
    for (i, (name, inputs, loss)) in cases.into_iter().enumerate() {
        let check = check_gradients(&inputs, 10, 1e-6, 500 + i as u64, loss)
            .map_err(|e| format!("{name}: {e}"))?;
        let err = check.max_rel_err();
        ensure(err <= 1e-6, || {
            format!("{name}: rel err {err:e} at {:?}", check.worst())
        })?;
        if err > worst.1 {
            worst = (name, err);
        }
    }
    let s6 = s6_loss_gradients()?;
    let s6_err = s6.max_rel_err();
    ensure(s6_err <= 1e-6, || {
        format!("s6 params: rel err {s6_err:e} at {:?}", s6.worst())
    })?;
    let e2e = toy_loss_gradients()?;
    let e2e_err = e2e.max_rel_err();
    ensure(e2e_err <= 1e-6, || {
        format!("toy model loss: rel err {e2e_err:e} at {:?}", e2e.worst())
    })?;
    within(t.elapsed(), 120.0, "gradient suite")?;
    Ok(format!(
        "{count} ops, worst {} at {:.1e}; S6 params {s6_err:.1e}; toy TinyViM loss worst {e2e_err:.1e}",
        worst.0, worst.1
    ))
}

// 6 ---------------------------------------------------------------------------------------

fn configuration_reproduction() -> Outcome {
    let targets = [
        (Variant::S, 5.6e6, 0.9e9),
        (Variant::B, 11.0e6, 1.5e9),
        (Variant::L, 31.7e6, 4.7e9),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::<f32>::randn(vec![1, 3, 224, 224], &mut rng);
    let mut parts = Vec::new();
    for (v, params, macs) in targets {
        let model = build_model::<f32>(v, 1000, 0).map_err(|e| e.to_string())?;
        let p = count_params(&model) as f64;
        let m = count_macs(&model, 224, 224).map_err(|e| e.to_string())? as f64;
        ensure(rel(p, params) <= 0.05, || {
            format!("{v}: {p} params vs {params}")
        })?;
        ensure(rel(m, macs) <= 0.10, || format!("{v}: {m} MACs vs {macs}"))?;
        let res: Vec<usize> = model
            .features(&x)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|f| f.dims()[2])
            .collect();
        ensure(res == [56, 28, 14, 7], || {
            format!("{v}: stage resolutions {res:?}")
        })?;
        let alphas: Vec<f64> = model.config.stages.iter().map(|s| s.alpha).collect();
        ensure(alphas == [0.25, 0.5, 0.5, 0.75] && alphas == ALPHAS, || {
            format!("{v}: alphas {alphas:?}")
        })?;
        let ratios = effective_ratios(&model.config, 224, 224);
        ensure(ratios == [8, 4, 2, 1] && ratios == POOL_RATIOS, || {
            format!("{v}: pool ratios {ratios:?}")
        })?;
        for (stage, mixer) in model.mixers() {
            ensure(
                mixer.cfg.alpha == ALPHAS[stage] && mixer.cfg.pool_ratio == POOL_RATIOS[stage],
                || format!("{v}: mixer in stage {stage} built with {:?}", mixer.cfg),
            )?;
        }
        parts.push(format!("{v} {:.2}M/{:.3}G", p / 1e6, m / 1e9));
    }
    Ok(format!(
        "{}; resolutions 56/28/14/7, alphas and ratios match",
        parts.join(", ")
    ))
}

// 7 ---------------------------------------------------------------------------------------

fn linear_complexity() -> Outcome {
    let rows = bench_scan(
        &[1024, 2048, 4096],
        &BenchConfig {
            repeats: 11,
            ..BenchConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let ratios = scaling_ratios(&rows);
    ensure(ratios.iter().all(|r| (1.6..=2.6).contains(r)), || {
        format!("time ratios {ratios:?}")
    })?;
    Ok(format!(
        "time(2L)/time(L) = {:.2}, {:.2} (median of 5, interleaved)",
        ratios[0], ratios[1]
    ))
}

// 8 ---------------------------------------------------------------------------------------

fn spectral_mechanism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = MixerConfig::new(0.5, 4, 16).map_err(|e| e.to_string())?;
    let mixer = LaplaceMixer::<f64>::new(cfg, MixerMode::LowOnly, &Ss2dConfig::default(), &mut rng)
        .map_err(|e| e.to_string())?;
    let mut wins = 0;
    for seed in 0..64 {
        let mut r = ChaCha8Rng::seed_from_u64(800 + seed);
        let x = Tensor::<f64>::randn(vec![1, 16, 16, 16], &mut r);
        let (low, high) = mixer.branch_outputs(&x).map_err(|e| e.to_string())?;
        let el = low_freq_energy_ratio(&low, 0.25).map_err(|e| e.to_string())?;
        let eh = low_freq_energy_ratio(&high, 0.25).map_err(|e| e.to_string())?;
        if el > eh {
            wins += 1;
        }
    }
    ensure(wins * 10 >= 64 * 9, || {
        format!("low branch wins on only {wins}/64 inputs")
    })?;

    let (h, w) = (12, 10);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let grid: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spectrum = fft2d(&grid, h, w).map_err(|e| e.to_string())?;
        let time: f64 = grid.iter().map(|v| v * v).sum();
        let freq: f64 = spectrum.iter().map(|z| z.norm_sqr()).sum::<f64>() / (h * w) as f64;
        worst = worst.max((time - freq).abs() / time);
        for ky in 0..h {
            for kx in 0..w {
                let a = spectrum[ky * w + kx];
                let b = spectrum[((h - ky) % h) * w + (w - kx) % w].conj();
                worst = worst.max((a - b).norm());
            }
        }
    }
    ensure(worst <= 1e-9, || {
        format!("Parseval/symmetry violation {worst:e}")
    })?;
    Ok(format!("low branch more low-frequency on {wins}/64 inputs; Parseval and symmetry within {worst:.1e}"))
}

// 9 ---------------------------------------------------------------------------------------

fn forward_time(cfg: &ModelConfig, x: &Tensor<f32>) -> Result<(f64, usize), String> {
    let model = Model::<f32>::new(cfg.clone(), 0).map_err(|e| e.to_string())?;
    let mut times = Vec::new();
    let mut tokens = 0;
    for _ in 0..5 {
        let t = Instant::now();
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        model.forward(&mut ctx, xv).map_err(|e| e.to_string())?;
        tokens = ctx.ssm_tokens;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok((times[2], tokens))
}

fn toy_training() -> Outcome {
    let t = Instant::now();
    let cfg = TrainConfig::toy(MixerMode::LowOnly, 7);
    let (_, report) = train_toy(&cfg).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    ensure(report.test_accuracy >= 0.80, || {
        format!("held-out accuracy {:.3}", report.test_accuracy)
    })?;
    ensure(report.steps_run <= 2000, || {
        format!("{} steps", report.steps_run)
    })?;
    within(elapsed, 900.0, "toy training")?;

    let x = Tensor::<f32>::randn(vec![4, 3, 32, 32], &mut ChaCha8Rng::seed_from_u64(9));
    let mut mc = ModelConfig::variant(Variant::Toy, 10);
    let mut measure = |mode| {
        mc.mixer_mode = mode;
        forward_time(&mc, &x)
    };
    let (t_low, tok_low) = measure(MixerMode::LowOnly)?;
    let (_, tok_lh) = measure(MixerMode::LowHigh)?;
    let (t_base, tok_base) = measure(MixerMode::Baseline)?;
    ensure(tok_low < tok_lh, || {
        format!("tokens low-only {tok_low} vs low+high {tok_lh}")
    })?;
    ensure(tok_low == report.ssm_tokens, || {
        "training and eval token counts disagree".into()
    })?;
    ensure(t_low < t_base, || {
        format!("low-only forward {t_low:.4} s vs baseline {t_base:.4} s")
    })?;
    Ok(format!(
        "held-out {:.1}% after {} steps in {:.0} s; SSM tokens low {tok_low} < low+high {tok_lh} (baseline {tok_base}); forward {:.1} ms vs baseline {:.1} ms",
        100.0 * report.test_accuracy,
        report.steps_run,
        elapsed.as_secs_f64(),
        t_low * 1e3,
        t_base * 1e3
    ))
}

// 10 --------------------------------------------------------------------------------------

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut parts = Vec::new();
    for v in [Variant::Toy, Variant::S] {
        let (classes, size) = if v == Variant::Toy {
            (10, 32)
        } else {
            (1000, 224)
        };
        let mut model = build_model::<f32>(v, classes, 10).map_err(|e| e.to_string())?;
        perturb_batch_norms(&mut model, 11);
        let path = dir.path().join(format!("{v}.tvmw"));
        save_weights(&model, &path).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let mut loaded = build_model::<f32>(v, classes, 99).map_err(|e| e.to_string())?;
        load_weights(&mut loaded, &path).map_err(|e| e.to_string())?;
        ensure(
            encode_weights(&loaded).map_err(|e| e.to_string())? == bytes,
            || format!("{v}: re-encoded bytes differ"),
        )?;
        ensure(
            decode_weights::<f32>(&bytes)
                .map_err(|e| e.to_string())?
                .len()
                == model.named_params().len(),
            || format!("{v}: entry count mismatch"),
        )?;
        let x = Tensor::<f32>::randn(vec![1, 3, size, size], &mut rng);
        let a = model.predict(&x).map_err(|e| e.to_string())?;
        let b = loaded.predict(&x).map_err(|e| e.to_string())?;
        ensure(
            a.data()
                .iter()
                .zip(b.data())
                .all(|(p, q)| p.to_bits() == q.to_bits()),
            || format!("{v}: forward outputs differ after reload"),
        )?;
        parts.push(format!("{v} {} bytes", bytes.len()));
    }
    Ok(format!(
        "{} round-trip bit-exact with identical logits",
        parts.join(", ")
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 10] = [
        ("ZOH correctness", zoh_correctness),
        ("recurrence equals convolution", scan_equals_convolution),
        ("Laplace identity", laplace_identity),
        ("reparameterization", reparameterization),
        ("gradient suite", gradient_suite),
        ("configuration reproduction", configuration_reproduction),
        ("linear complexity", linear_complexity),
        ("spectral mechanism", spectral_mechanism),
        ("toy training", toy_training),
        ("persistence", persistence),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        let line = match &outcome {
            Ok(detail) => format!("criterion {:>2} PASS {name} [{secs:.1} s]: {detail}", i + 1),
            Err(why) => format!("criterion {:>2} FAIL {name} [{secs:.1} s]: {why}", i + 1),
        };
        // written past the test harness capture so the summary always appears
        let _ = writeln!(std::io::stdout().lock(), "{line}");
        if outcome.is_err() {
            failed.push(line);
        }
    }
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
