//! Toy-scale training loop: AdamW with cosine decay on the synthetic grating set.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelConfig, Variant};
use crate::error::{ensure_arg, Error, Result};
use crate::harness::dataset::{generate_dataset, ToyDataset, ToyDatasetConfig};
use crate::harness::probe::accuracy;
use crate::laplace::MixerMode;
use crate::nn::{apply_bn_updates, Ctx, Mode, Module};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mode: MixerMode,
    pub data: ToyDatasetConfig,
    /// Held-out samples per class, drawn from an independent seed.
    pub test_per_class: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Held-out evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Stop at the first periodic evaluation reaching this held-out accuracy.
    pub target_accuracy: Option<f64>,
}

impl TrainConfig {
    /// Toy model in `mode` with the default schedule.
    pub fn toy(mode: MixerMode, seed: u64) -> Self {
        let mut model = ModelConfig::variant(Variant::Toy, 10);
        model.mixer_mode = mode;
        Self {
            model,
            mode,
            data: ToyDatasetConfig {
                seed,
                ..ToyDatasetConfig::default()
            },
            test_per_class: 50,
            steps: 2000,
            batch_size: 32,
            lr: 2e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.05,
            seed,
            eval_every: 100,
            target_accuracy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            self.steps > 0 && self.batch_size > 0,
            "steps and batch size must be positive"
        );
        ensure_arg!(self.test_per_class > 0, "held-out set must be non-empty");
        ensure_arg!(
            self.lr >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0,
            "bad optimizer settings"
        );
        ensure_arg!(
            (0.0..1.0).contains(&self.betas.0) && (0.0..1.0).contains(&self.betas.1),
            "betas must lie in [0, 1)"
        );
        ensure_arg!(
            self.model.num_classes == self.data.classes,
            "model classes must match the dataset"
        );
        self.model.validate()
    }

    pub fn test_data(&self) -> ToyDatasetConfig {
        ToyDatasetConfig {
            seed: self.data.seed ^ 0x5eed_7e57,
            per_class: self.test_per_class,
            ..self.data
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub steps_run: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// `(step, held-out accuracy)` at each periodic evaluation.
    pub evals: Vec<(usize, f64)>,
    /// Tokens through selective scans per image in one forward.
    pub ssm_tokens: usize,
    pub seconds: f64,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{i},{l}");
        }
        s
    }

    pub fn write_loss_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.loss_csv())?;
        Ok(())
    }
}

/// Decoupled-weight-decay Adam over a module's trainable params. Decay applies to tensors of
/// rank ≥ 2 only; params that received no gradient are left untouched.
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    moments: HashMap<u64, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            betas,
            eps,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(
        &mut self,
        module: &mut impl Module<f32>,
        grads: &HashMap<u64, Tensor<f32>>,
        lr: f64,
    ) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let moments = &mut self.moments;
        let (eps, wd) = (self.eps, self.weight_decay);
        module.visit_mut("", &mut |_, p| {
            let Some(g) = grads.get(&p.id()) else { return };
            if !p.is_trainable() {
                return;
            }
            let decay = if p.value.ndim() >= 2 {
                (1.0 - lr * wd) as f32
            } else {
                1.0
            };
            let (m, v) = moments
                .entry(p.id())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = (b1 as f32) * *m + (1.0 - b1 as f32) * g;
                *v = (b2 as f32) * *v + (1.0 - b2 as f32) * g * g;
                let update = (*m as f64 / c1) / ((*v as f64 / c2).sqrt() + eps);
                *w = *w * decay - (lr * update) as f32;
            }
        });
    }
}

/// Cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
}

/// Eval-mode accuracy over `ds` in chunks of `batch`.
pub fn evaluate(model: &Model<f32>, ds: &ToyDataset, batch: usize) -> Result<f64> {
    let classes = model.config.num_classes;
    let mut pred = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = ds.batch(chunk);
        let logits = model.predict(&x)?;
        pred.extend(logits.data().chunks_exact(classes).map(|row| {
            (0..classes)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap_or(0)
        }));
    }
    Ok(accuracy(&pred, &ds.labels))
}

/// Names of the trainable params that receive a gradient from one training-mode loss.
pub fn gradient_census(
    model: &Model<f32>,
    x: &Tensor<f32>,
    labels: &[usize],
) -> Result<BTreeSet<String>> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, Mode::Train);
    let xv = ctx.tape.constant(x.clone());
    let out = model.forward(&mut ctx, xv)?;
    let loss = ctx.tape.cross_entropy(out.logits, labels)?;
    let mut grads = ctx.tape.backward(loss)?;
    let by_id = ctx.param_grads(&mut grads);
    Ok(model
        .named_params()
        .into_iter()
        .filter(|(_, p)| p.is_trainable() && by_id.contains_key(&p.id()))
        .map(|(n, _)| n)
        .collect())
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Divergence {
            step,
            loss: f64::NAN,
        },
        e => e,
    }
}

/// Trains a fresh model; returns it with its report.
pub fn train_toy(cfg: &TrainConfig) -> Result<(Model<f32>, TrainReport)> {
    cfg.validate()?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.mixer_mode = cfg.mode;
    let mut model = Model::<f32>::new(model_cfg, cfg.seed)?;
    let train = generate_dataset(&cfg.data)?;
    let test = generate_dataset(&cfg.test_data())?;
    let report = train_model(&mut model, cfg, &train, &test)?;
    Ok((model, report))
}

/// Runs the optimisation loop on an existing model.
pub fn train_model(
    model: &mut Model<f32>,
    cfg: &TrainConfig,
    train: &ToyDataset,
    test: &ToyDataset,
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut order_rng =
        ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut opt = AdamW::new(cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut ssm_tokens = 0;
    let batch = cfg.batch_size.min(train.len());
    let mut steps_run = 0;
    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let (x, labels) = train.batch(&order[cursor..cursor + batch]);
        cursor += batch;

        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Mode::Train);
        let xv = ctx.tape.constant(x);
        let out = model.forward(&mut ctx, xv).map_err(|e| diverged(step, e))?;
        let loss_var = ctx
            .tape
            .cross_entropy(out.logits, &labels)
            .map_err(|e| diverged(step, e))?;
        let loss = ctx.tape.value(loss_var).data()[0] as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let mut grads = ctx.tape.backward(loss_var).map_err(|e| diverged(step, e))?;
        let param_grads = ctx.param_grads(&mut grads);
        let updates = std::mem::take(&mut ctx.bn_updates);
        ssm_tokens = ctx.ssm_tokens;
        drop(ctx);

        opt.step(model, &param_grads, cosine_lr(cfg.lr, step, cfg.steps));
        apply_bn_updates(model, &updates, BN_MOMENTUM)?;
        losses.push(loss);
        steps_run = step + 1;
        log::debug!("step {step} loss {loss:.4}");

        if cfg.eval_every > 0 && steps_run % cfg.eval_every == 0 && steps_run < cfg.steps {
            let acc = evaluate(model, test, 100)?;
            log::info!("step {steps_run}: held-out accuracy {acc:.3}");
            evals.push((steps_run, acc));
            if cfg.target_accuracy.is_some_and(|t| acc >= t) {
                break;
            }
        }
    }
    let test_accuracy = evaluate(model, test, 100)?;
    evals.push((steps_run, test_accuracy));
    Ok(TrainReport {
        losses,
        steps_run,
        train_accuracy: evaluate(model, train, 100)?,
        test_accuracy,
        evals,
        ssm_tokens,
        seconds: start.elapsed().as_secs_f64(),
    })
}
