//! Parameterized building blocks shared by the state-space, mixer and backbone modules.

use rand::Rng;

use crate::error::Result;
use crate::nn::param::{impl_module, kaiming_uniform, BnUpdate, Ctx, Param};
use crate::ops::{batch_norm_fold, Conv2dOpts};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
}
impl_module!(BatchNorm {
    gamma,
    beta,
    running_mean,
    running_var
});

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(vec![channels])),
            beta: Param::new(Tensor::zeros(vec![channels])),
            running_mean: Param::buffer(Tensor::zeros(vec![channels])),
            running_var: Param::buffer(Tensor::ones(vec![channels])),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(&self.gamma);
        let beta = ctx.param(&self.beta);
        if ctx.train() {
            let [n, _, h, w] = ctx.tape.value(x).dims4()?;
            let count = n * h * w;
            let (y, mean, var) = ctx.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
            let unbias = if count > 1 {
                T::lit(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            ctx.bn_updates.push(BnUpdate {
                mean_id: self.running_mean.id(),
                var_id: self.running_var.id(),
                batch_mean: mean,
                batch_var: var.into_iter().map(|v| v * unbias).collect(),
            });
            Ok(y)
        } else {
            ctx.tape.batch_norm_eval(
                x,
                gamma,
                beta,
                &self.running_mean.value,
                &self.running_var.value,
                BN_EPS,
            )
        }
    }

    /// Eval-mode `(scale, shift)` per channel.
    pub fn fold(&self) -> (Vec<T>, Vec<T>) {
        batch_norm_fold(
            &self.gamma.value,
            &self.beta.value,
            &self.running_mean.value,
            &self.running_var.value,
            BN_EPS,
        )
    }
}

/// 1×1 convolution with bias, i.e. a per-position linear map over channels.
#[derive(Debug, Clone)]
pub struct Pointwise<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}
impl_module!(Pointwise { weight, bias });

impl<T: Scalar> Pointwise<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(kaiming_uniform(vec![cout, cin, 1, 1], cin, rng)),
            bias: Param::new(Tensor::zeros(vec![cout])),
        }
    }

    pub fn cin(&self) -> usize {
        self.weight.value.dims()[1]
    }

    pub fn cout(&self) -> usize {
        self.weight.value.dims()[0]
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        ctx.tape.conv2d(x, w, Some(b), Conv2dOpts::pointwise())
    }

    pub fn macs(&self, positions: usize) -> u64 {
        (positions * self.cin() * self.cout()) as u64
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}
impl_module!(Linear { weight, bias });

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(kaiming_uniform(vec![dout, din], din, rng)),
            bias: Param::new(Tensor::zeros(vec![dout])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        ctx.tape.linear(x, w, Some(b))
    }
}

/// Layer norm over channels at each spatial position.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gain: Param<T>,
    pub bias: Param<T>,
}
impl_module!(LayerNorm { gain, bias });

impl<T: Scalar> LayerNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gain: Param::new(Tensor::ones(vec![channels])),
            bias: Param::new(Tensor::zeros(vec![channels])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(&self.gain);
        let b = ctx.param(&self.bias);
        ctx.tape.layer_norm_channels(x, g, b, LN_EPS)
    }
}

/// Convolution followed by batch norm; after [`ConvBn::fuse`] the norm lives in the conv bias.
#[derive(Debug, Clone)]
pub struct ConvBn<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub bn: Option<BatchNorm<T>>,
    pub opts: Conv2dOpts,
}
impl_module!(ConvBn { weight, bias, bn });

impl<T: Scalar> ConvBn<T> {
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        k: usize,
        opts: Conv2dOpts,
        rng: &mut R,
    ) -> Self {
        let cin_g = cin / opts.groups;
        Self {
            weight: Param::new(kaiming_uniform(vec![cout, cin_g, k, k], cin_g * k * k, rng)),
            bias: None,
            bn: Some(BatchNorm::new(cout)),
            opts,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight);
        let b = self.bias.as_ref().map(|b| ctx.param(b));
        let y = ctx.tape.conv2d(x, w, b, self.opts)?;
        match &self.bn {
            Some(bn) => bn.forward(ctx, y),
            None => Ok(y),
        }
    }

    pub fn is_fused(&self) -> bool {
        self.bn.is_none()
    }

    /// Folds the batch norm into the kernel and bias. Returns `false` if already fused.
    pub fn fuse(&mut self) -> bool {
        let Some(bn) = self.bn.take() else {
            return false;
        };
        let (scale, shift) = bn.fold();
        let w = &mut self.weight.value;
        let per_out = w.numel() / scale.len();
        for (co, chunk) in w.data_mut().chunks_exact_mut(per_out).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= scale[co]);
        }
        let bias: Vec<T> = match &self.bias {
            Some(b) => b
                .value
                .data()
                .iter()
                .zip(&scale)
                .zip(&shift)
                .map(|((&b, &s), &t)| b * s + t)
                .collect(),
            None => shift,
        };
        self.bias = Some(Param::new(
            Tensor::new(vec![bias.len()], bias).expect("bias length"),
        ));
        true
    }

    pub fn macs(&self, x_dims: &[usize]) -> Result<(u64, [usize; 4])> {
        let g = crate::ops::conv::ConvGeom::new(x_dims, self.weight.value.dims(), self.opts)?;
        Ok((g.macs(), g.out_dims()))
    }
}
