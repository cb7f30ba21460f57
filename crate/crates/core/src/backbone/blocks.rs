use rand::Rng;

use crate::error::Result;
use crate::laplace::{LaplaceMixer, MixerConfig, MixerMode};
use crate::nn::param::impl_module;
use crate::nn::{ConvBn, Ctx, Module, Param, Pointwise, RepDw};
use crate::ops::Conv2dOpts;
use crate::scalar::Scalar;
use crate::ssm::Ss2dConfig;
use crate::tape::Var;

/// Two stride-2 3×3 convs with batch norm and GeLU: `cin → D/2 → D`, a 4× reduction.
#[derive(Debug, Clone)]
pub struct Stem<T> {
    pub conv1: ConvBn<T>,
    pub conv2: ConvBn<T>,
}
impl_module!(Stem { conv1, conv2 });

impl<T: Scalar> Stem<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, width: usize, rng: &mut R) -> Self {
        let half = width / 2;
        Self {
            conv1: ConvBn::new(cin, half, 3, Conv2dOpts::new(2, 1, 1), rng),
            conv2: ConvBn::new(half, width, 3, Conv2dOpts::new(2, 1, 1), rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = ctx.tape.gelu(y)?;
        let y = self.conv2.forward(ctx, y)?;
        ctx.tape.gelu(y)
    }

    pub fn macs(&self, x_dims: &[usize]) -> Result<(u64, [usize; 4])> {
        let (a, d1) = self.conv1.macs(x_dims)?;
        let (b, d2) = self.conv2.macs(&d1)?;
        Ok((a + b, d2))
    }
}

/// Stride-2 reparameterized depth-wise conv followed by a 1×1 conv to the next width.
#[derive(Debug, Clone)]
pub struct PatchEmbed<T> {
    pub rep: RepDw<T>,
    pub proj: Pointwise<T>,
}
impl_module!(PatchEmbed { rep, proj });

impl<T: Scalar> PatchEmbed<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            rep: RepDw::new(cin, 2, rng),
            proj: Pointwise::new(cin, cout, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.rep.forward(ctx, x)?;
        self.proj.forward(ctx, y)
    }

    pub fn macs(&self, x_dims: &[usize]) -> Result<(u64, [usize; 4])> {
        let (a, d) = self.rep.macs(x_dims)?;
        let b = self.proj.macs(d[2] * d[3]);
        Ok((a + b, [d[0], self.proj.cout(), d[2], d[3]]))
    }
}

/// `1×1 (D → eD) → GeLU → 1×1 (eD → D)`.
#[derive(Debug, Clone)]
pub struct Ffn<T> {
    pub fc1: Pointwise<T>,
    pub fc2: Pointwise<T>,
}
impl_module!(Ffn { fc1, fc2 });

impl<T: Scalar> Ffn<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, expansion: usize, rng: &mut R) -> Self {
        Self {
            fc1: Pointwise::new(channels, channels * expansion, rng),
            fc2: Pointwise::new(channels * expansion, channels, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.fc1.forward(ctx, x)?;
        let y = ctx.tape.gelu(y)?;
        self.fc2.forward(ctx, y)
    }

    pub fn macs(&self, positions: usize) -> u64 {
        self.fc1.macs(positions) + self.fc2.macs(positions)
    }
}

/// `y = Rep3(x)`, then `y + FFN(y)`.
#[derive(Debug, Clone)]
pub struct LocalBlock<T> {
    pub rep: RepDw<T>,
    pub ffn: Ffn<T>,
}
impl_module!(LocalBlock { rep, ffn });

impl<T: Scalar> LocalBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, expansion: usize, rng: &mut R) -> Self {
        Self {
            rep: RepDw::new(channels, 1, rng),
            ffn: Ffn::new(channels, expansion, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.rep.forward(ctx, x)?;
        let f = self.ffn.forward(ctx, y)?;
        ctx.tape.add(y, f)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (h * w * self.rep.channels() * 9) as u64 + self.ffn.macs(h * w)
    }
}

/// `y = x + Mixer(x)`, then `y + FFN(y)`.
#[derive(Debug, Clone)]
pub struct TinyVimBlock<T> {
    pub mixer: LaplaceMixer<T>,
    pub ffn: Ffn<T>,
}
impl_module!(TinyVimBlock { mixer, ffn });

impl<T: Scalar> TinyVimBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        mixer: MixerConfig,
        mode: MixerMode,
        ss2d: &Ss2dConfig,
        expansion: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            mixer: LaplaceMixer::new(mixer, mode, ss2d, rng)?,
            ffn: Ffn::new(mixer.channels, expansion, rng),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let m = self.mixer.forward(ctx, x)?;
        let y = ctx.tape.add(m, x)?;
        let f = self.ffn.forward(ctx, y)?;
        ctx.tape.add(f, y)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.mixer.macs(h, w) + self.ffn.macs(h * w)
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Block<T> {
    Local(LocalBlock<T>),
    TinyVim(TinyVimBlock<T>),
}

impl<T: Scalar> Module<T> for Block<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>)) {
        match self {
            Self::Local(b) => b.visit(prefix, f),
            Self::TinyVim(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Self::Local(b) => b.visit_mut(prefix, f),
            Self::TinyVim(b) => b.visit_mut(prefix, f),
        }
    }
}

impl<T: Scalar> Block<T> {
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Self::Local(b) => b.forward(ctx, x),
            Self::TinyVim(b) => b.forward(ctx, x),
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            Self::Local(b) => b.macs(h, w),
            Self::TinyVim(b) => b.macs(h, w),
        }
    }

    pub fn is_tinyvim(&self) -> bool {
        matches!(self, Self::TinyVim(_))
    }

    /// Fuses every reparameterizable conv in the block; returns how many were fused.
    pub fn fuse(&mut self) -> usize {
        let rep = match self {
            Self::Local(b) => Some(&mut b.rep),
            Self::TinyVim(b) => b.mixer.rep.as_mut(),
        };
        rep.map_or(0, |r| r.fuse() as usize)
    }
}
