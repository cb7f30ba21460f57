//! Dense affine map over the last axis: `y[m, :] = W · x[m, :] + b`.

use crate::error::{ensure_shape, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `x: [m, k]`, `w: [n, k]`, `b: [n]` gives `[m, n]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    ensure_shape!(
        x.ndim() == 2 && w.ndim() == 2 && x.dims()[1] == w.dims()[1],
        "linear: input {:?} against weight {:?}",
        x.dims(),
        w.dims()
    );
    let (m, k, n) = (x.dims()[0], x.dims()[1], w.dims()[0]);
    if let Some(b) = b {
        ensure_shape!(
            b.dims() == [n],
            "linear bias {:?} for {n} outputs",
            b.dims()
        );
    }
    let mut y = Tensor::zeros(vec![m, n]);
    let (xd, wd) = (x.data(), w.data());
    for (i, row) in y.data_mut().chunks_exact_mut(n).enumerate() {
        let xr = &xd[i * k..(i + 1) * k];
        for (j, out) in row.iter_mut().enumerate() {
            let wr = &wd[j * k..(j + 1) * k];
            let mut acc = b.map_or(T::zero(), |b| b.data()[j]);
            for (&a, &c) in xr.iter().zip(wr) {
                acc += a * c;
            }
            *out = acc;
        }
    }
    Ok(y)
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn linear_grad<T: Scalar>(
    gout: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (m, k, n) = (x.dims()[0], x.dims()[1], w.dims()[0]);
    let mut gx = Tensor::zeros(vec![m, k]);
    let mut gw = Tensor::zeros(vec![n, k]);
    let mut gb = Tensor::zeros(vec![n]);
    let (gd, xd, wd) = (gout.data(), x.data(), w.data());
    for i in 0..m {
        let xr = &xd[i * k..(i + 1) * k];
        for j in 0..n {
            let g = gd[i * n + j];
            if g == T::zero() {
                continue;
            }
            gb.data_mut()[j] += g;
            let wr = &wd[j * k..(j + 1) * k];
            for (a, &wv) in gx.data_mut()[i * k..(i + 1) * k].iter_mut().zip(wr) {
                *a += g * wv;
            }
            for (a, &xv) in gw.data_mut()[j * k..(j + 1) * k].iter_mut().zip(xr) {
                *a += g * xv;
            }
        }
    }
    (gx, gw, gb)
}
