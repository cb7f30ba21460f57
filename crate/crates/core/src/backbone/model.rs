use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::blocks::{Block, LocalBlock, PatchEmbed, Stem, TinyVimBlock};
use crate::backbone::config::{ModelConfig, Variant};
use crate::error::{ensure_shape, Result};
use crate::laplace::effective_ratio;
use crate::nn::param::impl_module;
use crate::nn::{Ctx, Linear, Mode, Module};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Stage<T> {
    pub embed: Option<PatchEmbed<T>>,
    pub blocks: Vec<Block<T>>,
}
impl_module!(Stage { embed, blocks });

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub stem: Stem<T>,
    pub stages: Vec<Stage<T>>,
    pub head: Linear<T>,
    fused: bool,
}
impl_module!(Model { stem, stages, head });

pub struct ModelOutput {
    /// Output of every stage, `[B, D_s, H/2^(s+2), W/2^(s+2)]`.
    pub features: Vec<Var>,
    pub logits: Var,
}

/// Stage blocks in order: all but the last TinyViM block sit after `ceil(local/2)` local blocks,
/// the last one closes the stage.
pub fn block_layout(local: usize, tinyvim: usize) -> Vec<bool> {
    let mid = local.div_ceil(2);
    let mut out = vec![false; mid];
    out.extend(std::iter::repeat_n(true, tinyvim.saturating_sub(1)));
    out.extend(std::iter::repeat_n(false, local - mid));
    if tinyvim > 0 {
        out.push(true);
    }
    out
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Stem::new(config.in_channels, config.stages[0].channels, &mut rng);
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut prev = config.stages[0].channels;
        for (i, sc) in config.stages.iter().enumerate() {
            let embed = (i > 0).then(|| PatchEmbed::new(prev, sc.channels, &mut rng));
            let mut blocks = Vec::new();
            for is_tv in block_layout(sc.local_blocks, sc.tinyvim_blocks) {
                blocks.push(if is_tv {
                    Block::TinyVim(TinyVimBlock::new(
                        sc.mixer()?,
                        config.mixer_mode,
                        &config.ss2d,
                        config.ffn_expansion,
                        &mut rng,
                    )?)
                } else {
                    Block::Local(LocalBlock::new(sc.channels, config.ffn_expansion, &mut rng))
                });
            }
            stages.push(Stage { embed, blocks });
            prev = sc.channels;
        }
        let head = Linear::new(prev, config.num_classes, &mut rng);
        Ok(Self {
            config,
            stem,
            stages,
            head,
            fused: false,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<ModelOutput> {
        let [_, c, h, w] = ctx.tape.value(x).dims4()?;
        ensure_shape!(
            c == self.config.in_channels,
            "model expects {} input channels, got {c}",
            self.config.in_channels
        );
        let stride = self.config.total_stride();
        ensure_shape!(
            h % stride == 0 && w % stride == 0,
            "input {h}x{w} must be divisible by {stride}"
        );
        let mut y = self.stem.forward(ctx, x)?;
        let mut features = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if let Some(e) = &stage.embed {
                y = e.forward(ctx, y)?;
            }
            for b in &stage.blocks {
                y = b.forward(ctx, y)?;
            }
            features.push(y);
        }
        let pooled = ctx.tape.global_avg_pool(y)?;
        let logits = self.head.forward(ctx, pooled)?;
        Ok(ModelOutput { features, logits })
    }

    /// Eval-mode logits for a plain input batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        let out = self.forward(&mut ctx, xv)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Eval-mode stage features for a plain input batch.
    pub fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        let out = self.forward(&mut ctx, xv)?;
        Ok(out
            .features
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect())
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    pub fn mixers(&self) -> impl Iterator<Item = (usize, &crate::laplace::LaplaceMixer<T>)> {
        self.stages.iter().enumerate().flat_map(|(i, s)| {
            s.blocks.iter().filter_map(move |b| match b {
                Block::TinyVim(tv) => Some((i, &tv.mixer)),
                Block::Local(_) => None,
            })
        })
    }
}

pub fn build_model<T: Scalar>(variant: Variant, num_classes: usize, seed: u64) -> Result<Model<T>> {
    Model::new(ModelConfig::variant(variant, num_classes), seed)
}

/// Learnable scalars (batch-norm running statistics excluded).
pub fn count_params<T: Scalar>(model: &Model<T>) -> usize {
    model.num_params()
}

/// Multiply-accumulates of one image at `h × w`, counting convs (in fused form), linears and
/// the scan recurrence.
pub fn count_macs<T: Scalar>(model: &Model<T>, h: usize, w: usize) -> Result<u64> {
    let mut dims = [1, model.config.in_channels, h, w];
    let (mut total, d) = model.stem.macs(&dims)?;
    dims = d;
    for stage in &model.stages {
        if let Some(e) = &stage.embed {
            let (m, d) = e.macs(&dims)?;
            total += m;
            dims = d;
        }
        for b in &stage.blocks {
            total += b.macs(dims[2], dims[3]);
        }
    }
    Ok(total + (dims[1] * model.config.num_classes) as u64)
}

/// Folds every batch norm into its conv and collapses reparameterizable branches. A second call
/// is a no-op that logs a warning. Returns whether anything changed.
pub fn fuse_reparam<T: Scalar>(model: &mut Model<T>) -> bool {
    if model.fused {
        log::warn!("model is already fused; fuse_reparam is a no-op");
        return false;
    }
    model.stem.conv1.fuse();
    model.stem.conv2.fuse();
    for stage in &mut model.stages {
        if let Some(e) = &mut stage.embed {
            e.rep.fuse();
        }
        for b in &mut stage.blocks {
            b.fuse();
        }
    }
    model.fused = true;
    true
}

/// Pooling ratio each stage's mixers actually use at input `h × w`.
pub fn effective_ratios(config: &ModelConfig, h: usize, w: usize) -> Vec<usize> {
    config
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let f = 1 << (i + 2);
            effective_ratio(s.pool_ratio, h / f, w / f)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_places_mid_block() {
        assert_eq!(block_layout(2, 1), [false, false, true]);
        assert_eq!(
            block_layout(7, 2),
            [false, false, false, false, true, false, false, false, true]
        );
        assert_eq!(
            block_layout(8, 2),
            [false, false, false, false, true, false, false, false, false, true]
        );
        assert_eq!(block_layout(0, 1), [true]);
    }

    #[test]
    fn toy_shapes_and_logits() {
        let model = build_model::<f32>(Variant::Toy, 10, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(vec![2, 3, 32, 32], &mut rng);
        let feats = model.features(&x).unwrap();
        let sides: Vec<usize> = feats.iter().map(|f| f.dims()[2]).collect();
        assert_eq!(sides, [8, 4, 2, 1]);
        let chans: Vec<usize> = feats.iter().map(|f| f.dims()[1]).collect();
        assert_eq!(chans, [12, 16, 42, 56]);
        assert_eq!(model.predict(&x).unwrap().dims(), &[2, 10]);
        assert!(model.predict(&Tensor::zeros(vec![1, 3, 30, 30])).is_err());
    }

    #[test]
    fn ratios_divide_for_multiples_of_32() {
        let cfg = ModelConfig::variant(Variant::S, 10);
        assert_eq!(effective_ratios(&cfg, 224, 224), [8, 4, 2, 1]);
        assert_eq!(effective_ratios(&cfg, 64, 64), [8, 4, 2, 1]);
        assert_eq!(effective_ratios(&cfg, 32, 32), [8, 4, 2, 1]);
        assert_eq!(effective_ratios(&cfg, 96, 96), [8, 4, 2, 1]);
    }

    #[test]
    fn fusion_shrinks_and_is_idempotent() {
        let mut model = build_model::<f64>(Variant::Toy, 10, 3).unwrap();
        let before = count_params(&model);
        let macs = count_macs(&model, 32, 32).unwrap();
        assert!(fuse_reparam(&mut model));
        assert!(count_params(&model) < before);
        assert_eq!(count_macs(&model, 32, 32).unwrap(), macs);
        let snapshot: Vec<Tensor<f64>> = model
            .named_params()
            .into_iter()
            .map(|(_, p)| p.value.clone())
            .collect();
        assert!(!fuse_reparam(&mut model));
        let after: Vec<Tensor<f64>> = model
            .named_params()
            .into_iter()
            .map(|(_, p)| p.value.clone())
            .collect();
        assert_eq!(snapshot, after);
    }
}
