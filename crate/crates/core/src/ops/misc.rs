//! Channel slicing/concatenation, global pooling and the classification loss.

use crate::error::{ensure_arg, ensure_shape, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channels `[start, end)` of an NCHW tensor.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    ensure_shape!(
        start <= end && end <= c,
        "channel slice {start}..{end} of {c}"
    );
    let hw = h * w;
    let k = end - start;
    let mut data = Vec::with_capacity(n * k * hw);
    for ni in 0..n {
        data.extend_from_slice(&x.data()[(ni * c + start) * hw..(ni * c + end) * hw]);
    }
    Tensor::new(vec![n, k, h, w], data)
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    ensure_arg!(!parts.is_empty(), "concat of zero tensors");
    let [n, _, h, w] = parts[0].dims4()?;
    let mut c_total = 0;
    for p in parts {
        let [pn, pc, ph, pw] = p.dims4()?;
        ensure_shape!(
            pn == n && ph == h && pw == w,
            "concat {:?} with {:?}",
            parts[0].dims(),
            p.dims()
        );
        c_total += pc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * c_total * hw);
    for ni in 0..n {
        for p in parts {
            let pc = p.dims()[1];
            data.extend_from_slice(&p.data()[ni * pc * hw..(ni + 1) * pc * hw]);
        }
    }
    Tensor::new(vec![n, c_total, h, w], data)
}

/// Mean over the spatial axes: `[n, c, h, w]` to `[n, c]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::lit(hw as f64);
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(vec![n, c], data)
}

/// Mean softmax cross-entropy of `logits: [b, k]` against integer labels.
/// Returns the loss and the per-row softmax probabilities.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    ensure_shape!(
        logits.ndim() == 2,
        "cross_entropy expects [batch, classes], got {:?}",
        logits.dims()
    );
    let (b, k) = (logits.dims()[0], logits.dims()[1]);
    ensure_shape!(labels.len() == b, "{} labels for batch {b}", labels.len());
    ensure_arg!(
        labels.iter().all(|&l| l < k),
        "label out of range for {k} classes"
    );
    let mut probs = Tensor::zeros(vec![b, k]);
    let mut loss = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let z: T = row.iter().map(|&v| (v - max).exp()).sum();
        for (p, &v) in probs.data_mut()[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (v - max).exp() / z;
        }
        loss += z.ln() + max - row[label];
    }
    Ok((loss / T::lit(b as f64), probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_then_concat_restores() {
        let x = Tensor::<f64>::from_fn(vec![2, 5, 2, 3], |i| i as f64 * 0.5);
        let a = slice_channels(&x, 0, 2).unwrap();
        let b = slice_channels(&x, 2, 5).unwrap();
        assert_eq!(a.dims(), &[2, 2, 2, 3]);
        assert_eq!(concat_channels(&[&a, &b]).unwrap(), x);
        assert_eq!(slice_channels(&x, 5, 5).unwrap().numel(), 0);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(vec![3, 10]);
        let (loss, _) = cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-14);
        assert!(cross_entropy(&logits, &[0, 4, 10]).is_err());
    }
}
