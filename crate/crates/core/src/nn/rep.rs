//! Reparameterizable depth-wise 3×3 convolution.
//!
//! Training form: `BN(DW3x3(x)) + BN(DW1x1(x)) + BN(x)`, the identity branch only at stride 1.
//! [`RepDw::fuse`] folds every norm into its branch, embeds the 1×1 and identity branches in
//! the 3×3 center tap and sums, leaving one depth-wise 3×3 conv with bias.

use rand::Rng;

use crate::error::Result;
use crate::nn::param::impl_module;
use crate::nn::{BatchNorm, ConvBn, Ctx, Param};
use crate::ops::Conv2dOpts;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct RepDw<T> {
    /// 3×3 branch; after fusion the only branch, with bias and no norm.
    pub conv3: ConvBn<T>,
    pub conv1: Option<ConvBn<T>>,
    pub identity: Option<BatchNorm<T>>,
}
impl_module!(RepDw {
    conv3,
    conv1,
    identity
});

impl<T: Scalar> RepDw<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            conv3: ConvBn::new(
                channels,
                channels,
                3,
                Conv2dOpts::new(stride, 1, channels),
                rng,
            ),
            conv1: Some(ConvBn::new(
                channels,
                channels,
                1,
                Conv2dOpts::new(stride, 0, channels),
                rng,
            )),
            identity: (stride == 1).then(|| BatchNorm::new(channels)),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv3.weight.value.dims()[0]
    }

    pub fn stride(&self) -> usize {
        self.conv3.opts.stride
    }

    pub fn is_fused(&self) -> bool {
        self.conv3.is_fused() && self.conv1.is_none() && self.identity.is_none()
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.conv3.forward(ctx, x)?;
        if let Some(c1) = &self.conv1 {
            let b = c1.forward(ctx, x)?;
            y = ctx.tape.add(y, b)?;
        }
        if let Some(id) = &self.identity {
            let b = id.forward(ctx, x)?;
            y = ctx.tape.add(y, b)?;
        }
        Ok(y)
    }

    /// Collapses the branches into `conv3`. Returns `false` if there was nothing to fuse.
    pub fn fuse(&mut self) -> bool {
        if self.is_fused() {
            return false;
        }
        let c = self.channels();
        self.conv3.fuse();
        let mut kernel = self.conv3.weight.value.clone();
        let mut bias = self.conv3.bias.take().expect("fused conv has a bias").value;
        let mut add_center = |tap: &[T], shift: &[T]| {
            for ch in 0..c {
                kernel.data_mut()[ch * 9 + 4] += tap[ch];
                bias.data_mut()[ch] += shift[ch];
            }
        };
        if let Some(mut c1) = self.conv1.take() {
            c1.fuse();
            add_center(
                c1.weight.value.data(),
                c1.bias
                    .as_ref()
                    .expect("fused conv has a bias")
                    .value
                    .data(),
            );
        }
        if let Some(id) = self.identity.take() {
            let (scale, shift) = id.fold();
            add_center(&scale, &shift);
        }
        self.conv3.weight = Param::new(kernel);
        self.conv3.bias = Some(Param::new(bias));
        true
    }

    /// Multiply-accumulates of the inference (fused) form on input `x_dims`.
    pub fn macs(&self, x_dims: &[usize]) -> Result<(u64, [usize; 4])> {
        self.conv3.macs(x_dims)
    }
}

/// Builds a fused depth-wise kernel from explicit values, for tests and tooling.
pub fn delta_kernel<T: Scalar>(scale: &[T]) -> Tensor<T> {
    Tensor::from_fn(vec![scale.len(), 1, 3, 3], |i| {
        if i % 9 == 4 {
            scale[i / 9]
        } else {
            T::zero()
        }
    })
}
