//! Channel layer norm (per spatial position) and batch norm (per channel).

use crate::error::{ensure_arg, ensure_shape, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Saved statistics of a normalization forward pass, reused by its backward.
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    /// Normalized input `(x - mean) / sqrt(var + eps)`.
    pub xhat: Tensor<T>,
    /// `1 / sqrt(var + eps)` per normalization group.
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased variance per group.
    pub var: Vec<T>,
}

fn check_affine<T: Scalar>(c: usize, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<()> {
    ensure_arg!(eps > 0.0, "normalization eps must be positive, got {eps}");
    ensure_shape!(
        gain.dims() == [c] && bias.dims() == [c],
        "affine params {:?}/{:?} for {c} channels",
        gain.dims(),
        bias.dims()
    );
    Ok(())
}

/// Normalizes over the channel axis independently at every `(n, h, w)`.
pub fn layer_norm_channels<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let [n, c, h, w] = x.dims4()?;
    check_affine(c, gain, bias, eps)?;
    let hw = h * w;
    let eps = T::lit(eps);
    let cn = T::lit(c as f64);
    let mut y = Tensor::zeros(x.dims().to_vec());
    let mut xhat = Tensor::zeros(x.dims().to_vec());
    let mut mean = vec![T::zero(); n * hw];
    let mut var = vec![T::zero(); n * hw];
    let mut inv_std = vec![T::zero(); n * hw];
    let xd = x.data();
    for ni in 0..n {
        let base = ni * c * hw;
        for p in 0..hw {
            let mut m = T::zero();
            for ci in 0..c {
                m += xd[base + ci * hw + p];
            }
            m /= cn;
            let mut v = T::zero();
            for ci in 0..c {
                let d = xd[base + ci * hw + p] - m;
                v += d * d;
            }
            v /= cn;
            let is = T::one() / (v + eps).sqrt();
            let g = ni * hw + p;
            mean[g] = m;
            var[g] = v;
            inv_std[g] = is;
            for ci in 0..c {
                let i = base + ci * hw + p;
                let xh = (xd[i] - m) * is;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = xh * gain.data()[ci] + bias.data()[ci];
            }
        }
    }
    Ok((
        y,
        NormStats {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Returns `(grad_x, grad_gain, grad_bias)`.
pub fn layer_norm_channels_grad<T: Scalar>(
    gout: &Tensor<T>,
    gain: &Tensor<T>,
    stats: &NormStats<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = gout.dims4()?;
    let hw = h * w;
    let cn = T::lit(c as f64);
    let mut gx = Tensor::zeros(gout.dims().to_vec());
    let mut gg = Tensor::zeros(vec![c]);
    let mut gb = Tensor::zeros(vec![c]);
    let gd = gout.data();
    let xh = stats.xhat.data();
    for ni in 0..n {
        let base = ni * c * hw;
        for p in 0..hw {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for ci in 0..c {
                let i = base + ci * hw + p;
                let gxh = gd[i] * gain.data()[ci];
                s1 += gxh;
                s2 += gxh * xh[i];
                gg.data_mut()[ci] += gd[i] * xh[i];
                gb.data_mut()[ci] += gd[i];
            }
            s1 /= cn;
            s2 /= cn;
            let is = stats.inv_std[ni * hw + p];
            for ci in 0..c {
                let i = base + ci * hw + p;
                let gxh = gd[i] * gain.data()[ci];
                gx.data_mut()[i] = is * (gxh - s1 - xh[i] * s2);
            }
        }
    }
    Ok((gx, gg, gb))
}

/// Batch norm with statistics taken from the batch itself (training mode).
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let [n, c, h, w] = x.dims4()?;
    check_affine(c, gamma, beta, eps)?;
    let hw = h * w;
    let count = T::lit((n * hw) as f64);
    let eps = T::lit(eps);
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            mean[ci] += xd[base..base + hw].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let m = mean[ci];
            var[ci] += xd[base..base + hw]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = Tensor::zeros(x.dims().to_vec());
    let mut xhat = Tensor::zeros(x.dims().to_vec());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (m, is) = (mean[ci], inv_std[ci]);
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            for i in base..base + hw {
                let xh = (xd[i] - m) * is;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = xh * g + b;
            }
        }
    }
    Ok((
        y,
        NormStats {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)` for [`batch_norm_train`].
pub fn batch_norm_train_grad<T: Scalar>(
    gout: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = gout.dims4()?;
    let hw = h * w;
    let count = T::lit((n * hw) as f64);
    let gd = gout.data();
    let xh = stats.xhat.data();
    let mut gg = Tensor::zeros(vec![c]);
    let mut gb = Tensor::zeros(vec![c]);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                gg.data_mut()[ci] += gd[i] * xh[i];
                gb.data_mut()[ci] += gd[i];
            }
        }
    }
    let mut gx = Tensor::zeros(gout.dims().to_vec());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let k = gamma.data()[ci] * stats.inv_std[ci];
            let mg = gb.data()[ci] / count;
            let mgx = gg.data()[ci] / count;
            for i in base..base + hw {
                gx.data_mut()[i] = k * (gd[i] - mg - xh[i] * mgx);
            }
        }
    }
    Ok((gx, gg, gb))
}

/// Per-channel `scale` and `shift` equivalent to eval-mode batch norm with frozen statistics.
pub fn batch_norm_fold<T: Scalar>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let eps = T::lit(eps);
    let scale: Vec<T> = gamma
        .data()
        .iter()
        .zip(running_var.data())
        .map(|(&g, &v)| g / (v + eps).sqrt())
        .collect();
    let shift = beta
        .data()
        .iter()
        .zip(running_mean.data())
        .zip(&scale)
        .map(|((&b, &m), &s)| b - m * s)
        .collect();
    (scale, shift)
}
