//! 2D selective-scan block: input projection, depth-wise 3×3 conv, four-direction selective
//! scan with one shared SSM, merge, layer norm, SiLU gate, output projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Result};
use crate::nn::param::{impl_module, kaiming_uniform};
use crate::nn::{ConvBn, Ctx, LayerNorm, Param, Pointwise};
use crate::ops::Conv2dOpts;
use crate::scalar::Scalar;
use crate::ssm::s6::S6;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ss2dConfig {
    /// Inner width as a multiple of the block width.
    pub expand: usize,
    pub d_state: usize,
    /// Rank of the step projection; `None` means `ceil(C / 16)`.
    pub dt_rank: Option<usize>,
    /// Include the `D·x` skip path.
    pub skip: bool,
}

impl Default for Ss2dConfig {
    fn default() -> Self {
        Self {
            expand: 2,
            d_state: 16,
            dt_rank: None,
            skip: true,
        }
    }
}

impl Ss2dConfig {
    pub fn dt_rank_for(&self, channels: usize) -> usize {
        self.dt_rank.unwrap_or(channels.div_ceil(16)).max(1)
    }
}

#[derive(Debug, Clone)]
pub struct Ss2d<T> {
    pub in_proj: Pointwise<T>,
    pub dw: ConvBn<T>,
    pub ssm: S6<T>,
    pub norm: LayerNorm<T>,
    pub out_proj: Pointwise<T>,
}
impl_module!(Ss2d {
    in_proj,
    dw,
    ssm,
    norm,
    out_proj
});

impl<T: Scalar> Ss2d<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, cfg: &Ss2dConfig, rng: &mut R) -> Self {
        let inner = channels * cfg.expand;
        let dw = ConvBn {
            weight: Param::new(kaiming_uniform(vec![inner, 1, 3, 3], 9, rng)),
            bias: Some(Param::new(Tensor::zeros(vec![inner]))),
            bn: None,
            opts: Conv2dOpts::new(1, 1, inner),
        };
        Self {
            in_proj: Pointwise::new(channels, 2 * inner, rng),
            dw,
            ssm: S6::new(inner, cfg.d_state, cfg.dt_rank_for(channels), cfg.skip, rng),
            norm: LayerNorm::new(inner),
            out_proj: Pointwise::new(inner, channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.in_proj.cin()
    }

    pub fn inner(&self) -> usize {
        self.ssm.channels()
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let [_, c, h, w] = ctx.tape.value(x).dims4()?;
        ensure_shape!(
            c == self.channels(),
            "ss2d expects {} channels, got {c}",
            self.channels()
        );
        let e = self.inner();
        let xz = self.in_proj.forward(ctx, x)?;
        let xs = ctx.tape.slice_channels(xz, 0, e)?;
        let z = ctx.tape.slice_channels(xz, e, 2 * e)?;
        let xs = self.dw.forward(ctx, xs)?;
        let xs = ctx.tape.silu(xs)?;
        let seqs = ctx.tape.cross_scan(xs)?;
        let ys = self.ssm.forward(ctx, seqs)?;
        ctx.ssm_tokens += h * w;
        let y = ctx.tape.cross_merge(ys, h, w)?;
        let y = self.norm.forward(ctx, y)?;
        let gate = ctx.tape.silu(z)?;
        let y = ctx.tape.mul(y, gate)?;
        self.out_proj.forward(ctx, y)
    }

    /// Multiply-accumulates for one image on an `h × w` grid.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let l = h * w;
        self.in_proj.macs(l)
            + (l * self.inner() * 9) as u64
            + self.ssm.macs(4 * l)
            + self.out_proj.macs(l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::ops::activation::{silu, softplus};
    use crate::ssm::zoh::zoh;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(block: &Ss2d<f64>, x: &Tensor<f64>) -> (Tensor<f64>, usize) {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        let y = block.forward(&mut ctx, xv).unwrap();
        let tokens = ctx.ssm_tokens;
        (tape.value(y).clone(), tokens)
    }

    fn randomize_biases(block: &mut Ss2d<f64>, rng: &mut ChaCha8Rng) {
        use crate::nn::Module;
        block.visit_mut("", &mut |name, p| {
            if name.ends_with("bias") || name.ends_with("gain") {
                let n = p.numel();
                p.value = Tensor::uniform(vec![n], -0.5, 0.5, rng)
                    .add(&p.value)
                    .unwrap();
            }
        });
    }

    #[test]
    fn single_token_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let cfg = Ss2dConfig {
            expand: 1,
            d_state: 2,
            dt_rank: Some(1),
            skip: true,
        };
        let mut block = Ss2d::<f64>::new(2, &cfg, &mut rng);
        randomize_biases(&mut block, &mut rng);
        let x = Tensor::randn(vec![1, 2, 1, 1], &mut rng);
        let (y, tokens) = run(&block, &x);
        assert_eq!(tokens, 1);

        let e = 2;
        let lin = |w: &Tensor<f64>, b: Option<&Tensor<f64>>, v: &[f64]| -> Vec<f64> {
            let (rows, cols) = (w.dims()[0], w.numel() / w.dims()[0]);
            (0..rows)
                .map(|r| {
                    (0..cols)
                        .map(|k| w.data()[r * cols + k] * v[k])
                        .sum::<f64>()
                        + b.map_or(0.0, |b| b.data()[r])
                })
                .collect()
        };
        let xz = lin(
            &block.in_proj.weight.value,
            Some(&block.in_proj.bias.value),
            x.data(),
        );
        // 3x3 depth-wise conv on a 1x1 grid with zero padding sees only the center tap
        let u: Vec<f64> = (0..e)
            .map(|ch| {
                silu(
                    block.dw.weight.value.data()[ch * 9 + 4] * xz[ch]
                        + block.dw.bias.as_ref().unwrap().value.data()[ch],
                )
            })
            .collect();
        let s = &block.ssm;
        let bt = lin(&s.b_proj.value, None, &u);
        let ct = lin(&s.c_proj.value, None, &u);
        let dt: Vec<f64> = lin(
            &s.dt_up.value,
            Some(&s.dt_bias.value),
            &lin(&s.dt_down.value, None, &u),
        )
        .into_iter()
        .map(softplus)
        .collect();
        let ssm_out: Vec<f64> = (0..e)
            .map(|ch| {
                let mut acc = s.d_skip.as_ref().unwrap().value.data()[ch] * u[ch];
                for k in 0..2 {
                    let a = -s.a_log.value.data()[ch * 2 + k].exp();
                    let (_, bbar) = zoh(a, bt[k], dt[ch]);
                    acc += ct[k] * bbar * u[ch];
                }
                4.0 * acc
            })
            .collect();
        let mean = ssm_out.iter().sum::<f64>() / e as f64;
        let var = ssm_out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / e as f64;
        let normed: Vec<f64> = (0..e)
            .map(|ch| {
                (ssm_out[ch] - mean) / (var + crate::nn::layers::LN_EPS).sqrt()
                    * block.norm.gain.value.data()[ch]
                    + block.norm.bias.value.data()[ch]
            })
            .collect();
        let gated: Vec<f64> = (0..e).map(|ch| normed[ch] * silu(xz[e + ch])).collect();
        let expect = lin(
            &block.out_proj.weight.value,
            Some(&block.out_proj.bias.value),
            &gated,
        );
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let block = Ss2d::<f64>::new(4, &Ss2dConfig::default(), &mut rng);
        let (y, _) = run(&block, &Tensor::zeros(vec![1, 4, 4, 4]));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_position_reaches_every_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let block = Ss2d::<f64>::new(4, &Ss2dConfig::default(), &mut rng);
        let x = Tensor::randn(vec![1, 4, 4, 4], &mut rng);
        let (y0, tokens) = run(&block, &x);
        assert_eq!(tokens, 16);
        for pos in [0, 5, 15] {
            let mut xp = x.clone();
            for ch in 0..4 {
                xp.data_mut()[ch * 16 + pos] += 0.5;
            }
            let (y1, _) = run(&block, &xp);
            for p in 0..16 {
                let changed = (0..4)
                    .any(|ch| (y1.data()[ch * 16 + p] - y0.data()[ch * 16 + p]).abs() > 1e-12);
                assert!(changed, "perturbing {pos} left {p} untouched");
            }
        }
    }
}
