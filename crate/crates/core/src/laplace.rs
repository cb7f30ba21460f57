//! Token mixer that routes a Laplace low/high frequency split to separate branches.
//!
//! The first `αD` channels are split into a pooled low band and a full-resolution residual; the
//! low band goes through the 2D selective scan at reduced resolution, everything else through a
//! reparameterized depth-wise conv. The upsampled low output is added onto the first `αD`
//! channels of the conv output and a 1×1 conv mixes all channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, ensure_shape, Error, Result};
use crate::nn::param::impl_module;
use crate::nn::{Ctx, Mode, Pointwise, RepDw};
use crate::ops::{avg_pool2d, concat_channels, slice_channels, upsample_nearest};
use crate::scalar::Scalar;
use crate::ssm::{Ss2d, Ss2dConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which inputs feed the selective scan inside the mixer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixerMode {
    /// Scan over the pooled low band (the default mixer).
    LowOnly,
    /// Scan over the full-resolution residual band; the pooled band bypasses the scan.
    HighOnly,
    /// Both bands through one shared scan block.
    LowHigh,
    /// No scan; the pooled band bypasses it.
    ConvOnly,
    /// Plain scan block over all channels at full resolution, then the 1×1 conv.
    Baseline,
}

impl MixerMode {
    pub const ALL: [MixerMode; 5] = [
        Self::LowOnly,
        Self::HighOnly,
        Self::LowHigh,
        Self::ConvOnly,
        Self::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::LowOnly => "low-only",
            Self::HighOnly => "high-only",
            Self::LowHigh => "low-high",
            Self::ConvOnly => "conv-only",
            Self::Baseline => "baseline",
        }
    }

    /// Tokens per image the scan sees on an `h × w` map with pooling ratio `r`.
    pub fn ssm_tokens(self, h: usize, w: usize, r: usize) -> usize {
        let low = (h / r) * (w / r);
        match self {
            Self::LowOnly => low,
            Self::HighOnly | Self::Baseline => h * w,
            Self::LowHigh => h * w + low,
            Self::ConvOnly => 0,
        }
    }
}

impl std::str::FromStr for MixerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mixer mode `{s}`")))
    }
}

impl std::fmt::Display for MixerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    /// Fraction of channels in the low branch, in `(0, 1]`.
    pub alpha: f64,
    /// Nominal pooling ratio; clamped per input by [`effective_ratio`].
    pub pool_ratio: usize,
    pub channels: usize,
}

impl MixerConfig {
    pub fn new(alpha: f64, pool_ratio: usize, channels: usize) -> Result<Self> {
        let cfg = Self {
            alpha,
            pool_ratio,
            channels,
        };
        cfg.low_channels()?;
        ensure_arg!(pool_ratio >= 1, "pool ratio must be positive");
        Ok(cfg)
    }

    /// `αD`, which must be an integer.
    pub fn low_channels(&self) -> Result<usize> {
        low_channel_count(self.alpha, self.channels)
    }
}

fn low_channel_count(alpha: f64, channels: usize) -> Result<usize> {
    ensure_arg!(
        alpha > 0.0 && alpha <= 1.0,
        "alpha must lie in (0, 1], got {alpha}"
    );
    let exact = alpha * channels as f64;
    let n = exact.round();
    ensure_arg!(
        (exact - n).abs() < 1e-9 && n >= 1.0,
        "alpha {alpha} splits {channels} channels into a non-integral or empty low part"
    );
    Ok(n as usize)
}

/// Largest divisor of `gcd(h, w)` not exceeding `r`, so pooling is exact and leaves ≥ 1 cell.
pub fn effective_ratio(r: usize, h: usize, w: usize) -> usize {
    let g = gcd(h, w);
    (1..=r.min(g))
        .rev()
        .find(|d| g.is_multiple_of(*d))
        .unwrap_or(1)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Channels `[0, αD)` and `[αD, D)`; with `α = 1` the second part has zero channels.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, alpha: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    let [_, d, _, _] = x.dims4()?;
    let k = low_channel_count(alpha, d)?;
    Ok((slice_channels(x, 0, k)?, slice_channels(x, k, d)?))
}

/// `X_ll = Pool_r(X_l)` and `X_lh = X_l - Upsample_r(X_ll)`.
pub fn laplace_decompose<T: Scalar>(x_l: &Tensor<T>, r: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let low = avg_pool2d(x_l, r)?;
    let high = x_l.sub(&upsample_nearest(&low, r)?)?;
    Ok((low, high))
}

impl<T: Scalar> Tape<T> {
    pub fn laplace_decompose(&mut self, x_l: Var, r: usize) -> Result<(Var, Var)> {
        let low = self.avg_pool2d(x_l, r)?;
        let up = self.upsample_nearest(low, r)?;
        let high = self.sub(x_l, up)?;
        Ok((low, high))
    }
}

enum Branches {
    /// Baseline: the scan block output.
    Plain(Var),
    /// Conv output over all `d` channels and the low-band term for its first `k` channels.
    Split {
        conv: Var,
        low: Var,
        k: usize,
        d: usize,
    },
}

#[derive(Debug, Clone)]
pub struct LaplaceMixer<T> {
    pub cfg: MixerConfig,
    pub mode: MixerMode,
    /// `αD` channels wide, or `D` in [`MixerMode::Baseline`].
    pub ss2d: Ss2d<T>,
    /// Absent in [`MixerMode::Baseline`].
    pub rep: Option<RepDw<T>>,
    pub proj: Pointwise<T>,
}
impl_module!(LaplaceMixer { ss2d, rep, proj });

impl<T: Scalar> LaplaceMixer<T> {
    pub fn new<R: Rng + ?Sized>(
        cfg: MixerConfig,
        mode: MixerMode,
        ss2d: &Ss2dConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let low = cfg.low_channels()?;
        let d = cfg.channels;
        let (ss2d, rep) = match mode {
            MixerMode::Baseline => (Ss2d::new(d, ss2d, rng), None),
            _ => (Ss2d::new(low, ss2d, rng), Some(RepDw::new(d, 1, rng))),
        };
        Ok(Self {
            cfg,
            mode,
            ss2d,
            rep,
            proj: Pointwise::new(d, d, rng),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let fused = match self.branches(ctx, x)? {
            Branches::Plain(y) => y,
            Branches::Split { conv, low, k, d } => {
                if k < d {
                    let head = ctx.tape.slice_channels(conv, 0, k)?;
                    let head = ctx.tape.add(head, low)?;
                    let tail = ctx.tape.slice_channels(conv, k, d)?;
                    ctx.tape.concat_channels(&[head, tail])?
                } else {
                    ctx.tape.add(conv, low)?
                }
            }
        };
        self.proj.forward(ctx, fused)
    }

    fn branches(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Branches> {
        let [_, d, h, w] = ctx.tape.value(x).dims4()?;
        ensure_shape!(
            d == self.cfg.channels,
            "mixer expects {} channels, got {d}",
            self.cfg.channels
        );
        let rep = match (&self.rep, self.mode) {
            (Some(rep), mode) if mode != MixerMode::Baseline => rep,
            _ => return Ok(Branches::Plain(self.ss2d.forward(ctx, x)?)),
        };
        let k = self.cfg.low_channels()?;
        let r = effective_ratio(self.cfg.pool_ratio, h, w);
        let x_l = ctx.tape.slice_channels(x, 0, k)?;
        let (x_ll, x_lh) = ctx.tape.laplace_decompose(x_l, r)?;
        let x_hh = if k < d {
            let x_h = ctx.tape.slice_channels(x, k, d)?;
            ctx.tape.concat_channels(&[x_lh, x_h])?
        } else {
            x_lh
        };
        let conv = rep.forward(ctx, x_hh)?;

        let low = match self.mode {
            MixerMode::LowOnly | MixerMode::LowHigh => self.ss2d.forward(ctx, x_ll)?,
            _ => x_ll,
        };
        let mut low = ctx.tape.upsample_nearest(low, r)?;
        if matches!(self.mode, MixerMode::HighOnly | MixerMode::LowHigh) {
            let high = self.ss2d.forward(ctx, x_lh)?;
            low = ctx.tape.add(low, high)?;
        }
        Ok(Branches::Split { conv, low, k, d })
    }

    /// Eval-mode `(upsampled low-branch output, depth-wise conv output)` before fusion.
    pub fn branch_outputs(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        match self.branches(&mut ctx, xv)? {
            Branches::Split { conv, low, .. } => {
                Ok((tape.value(low).clone(), tape.value(conv).clone()))
            }
            Branches::Plain(_) => Err(Error::InvalidArgument(format!(
                "{} mixer has no frequency branches",
                self.mode
            ))),
        }
    }

    /// Multiply-accumulates per image on an `h × w` map (fused conv form).
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let l = h * w;
        let d = self.cfg.channels;
        let proj = self.proj.macs(l);
        if self.rep.is_none() || self.mode == MixerMode::Baseline {
            return self.ss2d.macs(h, w) + proj;
        }
        let r = effective_ratio(self.cfg.pool_ratio, h, w);
        let scan = match self.mode {
            MixerMode::LowOnly => self.ss2d.macs(h / r, w / r),
            MixerMode::HighOnly => self.ss2d.macs(h, w),
            MixerMode::LowHigh => self.ss2d.macs(h, w) + self.ss2d.macs(h / r, w / r),
            _ => 0,
        };
        (l * d * 9) as u64 + scan + proj
    }
}

/// Evaluation-mode forward of a mixer on a plain tensor.
pub fn mixer_forward<T: Scalar>(mixer: &LaplaceMixer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, Mode::Eval);
    let xv = ctx.tape.constant(x.clone());
    let y = mixer.forward(&mut ctx, xv)?;
    Ok(tape.value(y).clone())
}

/// Inverse of [`split_channels`].
pub fn merge_channels<T: Scalar>(low: &Tensor<T>, high: &Tensor<T>) -> Result<Tensor<T>> {
    concat_channels(&[low, high])
}
