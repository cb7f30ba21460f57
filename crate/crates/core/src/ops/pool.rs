//! Average pooling and nearest-neighbour upsampling, the two halves of a Laplace pyramid level.

use crate::error::{ensure_arg, ensure_shape, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Non-overlapping `r×r` mean pooling. `r` must divide both spatial extents.
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    ensure_arg!(r >= 1, "pool ratio must be positive");
    ensure_shape!(
        h % r == 0 && w % r == 0,
        "pool ratio {r} does not divide spatial dims {h}x{w}"
    );
    let (ho, wo) = (h / r, w / r);
    let inv = T::one() / T::lit((r * r) as f64);
    let mut out = Tensor::zeros(vec![n, c, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    // Each window is averaged as `anchor + mean(v - anchor)` with the top-left cell as anchor,
    // so a window of identical values reproduces that value bit-exactly.
    let mut dev = vec![T::zero(); wo];
    for plane in 0..n * c {
        let xp = &xd[plane * h * w..(plane + 1) * h * w];
        let op = &mut od[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            let anchors = &xp[oy * r * w..(oy * r + 1) * w];
            dev.iter_mut().for_each(|d| *d = T::zero());
            for y in oy * r..(oy + 1) * r {
                for (xx, &v) in xp[y * w..(y + 1) * w].iter().enumerate() {
                    dev[xx / r] += v - anchors[(xx / r) * r];
                }
            }
            for (ox, o) in op[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                *o = anchors[ox * r] + dev[ox] * inv;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`avg_pool2d`]: spreads each gradient cell evenly over its window.
pub fn avg_pool2d_grad<T: Scalar>(gout: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let inv = T::one() / T::lit((r * r) as f64);
    Ok(upsample_nearest(gout, r)?.scale(inv))
}

/// Replicates every cell into an `r×r` block.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    ensure_arg!(r >= 1, "upsample ratio must be positive");
    if r == 1 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h * r, w * r);
    let mut out = Tensor::zeros(vec![n, c, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        let xp = &xd[plane * h * w..(plane + 1) * h * w];
        let op = &mut od[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..ho {
            let xrow = &xp[(y / r) * w..(y / r + 1) * w];
            for (xx, o) in op[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                *o = xrow[xx / r];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_nearest`]: sums each `r×r` block.
pub fn upsample_nearest_grad<T: Scalar>(gout: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    Ok(avg_pool2d(gout, r)?.scale(T::lit((r * r) as f64)))
}
