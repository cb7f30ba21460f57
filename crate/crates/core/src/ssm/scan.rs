//! The two evaluation modes of a discrete diagonal SSM: the step-by-step recurrence
//! `h_t = Ā h_{t-1} + B̄ x_t, y_t = C h_t` and, for time-invariant parameters, the equivalent
//! causal convolution with kernel `K̄[j] = C Ā^j B̄`.

use crate::error::{ensure_arg, ensure_shape, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Discrete parameters for `channels` independent diagonal SSMs of size `state`.
///
/// `a_bar`, `b_bar` and `c` are laid out `[steps, channels, state]`. `steps == 1` means the
/// parameters are time-invariant and broadcast over the sequence; otherwise `steps` must equal
/// the sequence length.
#[derive(Debug, Clone)]
pub struct DiscreteSsm<T> {
    steps: usize,
    channels: usize,
    state: usize,
    a_bar: Vec<T>,
    b_bar: Vec<T>,
    c: Vec<T>,
    d_skip: Option<Vec<T>>,
}

impl<T: Scalar> DiscreteSsm<T> {
    pub fn new(
        steps: usize,
        channels: usize,
        state: usize,
        a_bar: Vec<T>,
        b_bar: Vec<T>,
        c: Vec<T>,
        d_skip: Option<Vec<T>>,
    ) -> Result<Self> {
        ensure_arg!(
            steps >= 1 && channels >= 1 && state >= 1,
            "SSM extents must be positive"
        );
        let n = steps * channels * state;
        ensure_shape!(
            a_bar.len() == n && b_bar.len() == n && c.len() == n,
            "SSM params need {n} entries each ([{steps}, {channels}, {state}])"
        );
        if let Some(d) = &d_skip {
            ensure_shape!(
                d.len() == channels,
                "skip gain has {} entries for {channels} channels",
                d.len()
            );
        }
        Ok(Self {
            steps,
            channels,
            state,
            a_bar,
            b_bar,
            c,
            d_skip,
        })
    }

    /// Time-invariant parameters, each laid out `[channels, state]`.
    pub fn time_invariant(
        channels: usize,
        state: usize,
        a_bar: Vec<T>,
        b_bar: Vec<T>,
        c: Vec<T>,
        d_skip: Option<Vec<T>>,
    ) -> Result<Self> {
        Self::new(1, channels, state, a_bar, b_bar, c, d_skip)
    }

    pub fn is_time_invariant(&self) -> bool {
        self.steps == 1
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn d_skip(&self) -> Option<&[T]> {
        self.d_skip.as_deref()
    }

    fn offset(&self, t: usize, ch: usize) -> usize {
        let t = if self.steps == 1 { 0 } else { t };
        (t * self.channels + ch) * self.state
    }
}

/// Runs the recurrence from `h_0 = 0` over `x: [L, channels]`, returning `y: [L, channels]`.
pub fn ssm_scan_sequential<T: Scalar>(ssm: &DiscreteSsm<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_shape!(
        x.ndim() == 2 && x.dims()[1] == ssm.channels,
        "sequence dims {:?} for {} channels",
        x.dims(),
        ssm.channels
    );
    let len = x.dims()[0];
    ensure_shape!(
        ssm.steps == 1 || ssm.steps == len,
        "per-token params cover {} steps, sequence has {len}",
        ssm.steps
    );
    let d = ssm.channels;
    let n = ssm.state;
    let mut y = Tensor::zeros(vec![len, d]);
    let mut h = vec![T::zero(); n];
    for ch in 0..d {
        h.iter_mut().for_each(|v| *v = T::zero());
        let skip = ssm.d_skip.as_ref().map_or(T::zero(), |s| s[ch]);
        for t in 0..len {
            let o = ssm.offset(t, ch);
            let xt = x.data()[t * d + ch];
            let mut acc = T::zero();
            for k in 0..n {
                h[k] = ssm.a_bar[o + k] * h[k] + ssm.b_bar[o + k] * xt;
                acc += ssm.c[o + k] * h[k];
            }
            y.data_mut()[t * d + ch] = acc + skip * xt;
        }
    }
    Ok(y)
}

/// Kernel `K̄[j] = Σ_n C_n Ā_n^j B̄_n` for `j < len`, laid out `[len, channels]`.
pub fn ssm_kernel<T: Scalar>(ssm: &DiscreteSsm<T>, len: usize) -> Result<Tensor<T>> {
    ensure_arg!(
        ssm.is_time_invariant(),
        "convolution kernel needs time-invariant params, got {} steps",
        ssm.steps
    );
    let d = ssm.channels;
    let mut k = Tensor::zeros(vec![len, d]);
    for ch in 0..d {
        let o = ssm.offset(0, ch);
        // running products C_n Ā_n^j B̄_n
        let mut terms: Vec<T> = (0..ssm.state)
            .map(|s| ssm.c[o + s] * ssm.b_bar[o + s])
            .collect();
        for j in 0..len {
            k.data_mut()[j * d + ch] = terms.iter().copied().sum();
            for (s, term) in terms.iter_mut().enumerate() {
                *term *= ssm.a_bar[o + s];
            }
        }
    }
    Ok(k)
}

/// Causal convolution `y_t = Σ_{j≤t} K̄[j] x_{t-j} (+ D x_t)` over `[L, channels]` sequences.
pub fn ssm_conv_apply<T: Scalar>(
    kernel: &Tensor<T>,
    x: &Tensor<T>,
    d_skip: Option<&[T]>,
) -> Result<Tensor<T>> {
    ensure_shape!(
        kernel.ndim() == 2 && kernel.dims() == x.dims(),
        "kernel dims {:?} must equal sequence dims {:?}",
        kernel.dims(),
        x.dims()
    );
    let (len, d) = (x.dims()[0], x.dims()[1]);
    if let Some(s) = d_skip {
        ensure_shape!(
            s.len() == d,
            "skip gain has {} entries for {d} channels",
            s.len()
        );
    }
    let (kd, xd) = (kernel.data(), x.data());
    let y = Tensor::from_fn(vec![len, d], |i| {
        let (t, ch) = (i / d, i % d);
        let mut acc = T::zero();
        for j in 0..=t {
            acc += kd[j * d + ch] * xd[(t - j) * d + ch];
        }
        acc + d_skip.map_or(T::zero(), |s| s[ch] * xd[i])
    });
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_static(rng: &mut ChaCha8Rng, d: usize, n: usize) -> DiscreteSsm<f64> {
        let a: Vec<f64> = (0..d * n).map(|_| rng.random_range(0.05..0.95)).collect();
        let b: Vec<f64> = (0..d * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..d * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let skip: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        DiscreteSsm::time_invariant(d, n, a, b, c, Some(skip)).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ssm = random_static(&mut rng, 3, 4);
        let y = ssm_scan_sequential(&ssm, &Tensor::zeros(vec![10, 3])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_unrolls() {
        let ssm = DiscreteSsm::time_invariant(
            1,
            2,
            vec![0.3, 0.7],
            vec![2.0, -1.0],
            vec![0.5, 4.0],
            Some(vec![1.5]),
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let y = ssm_scan_sequential(&ssm, &x).unwrap();
        // C·B̄·x + D·x = (0.5·2 + 4·(−1))·3 + 1.5·3
        assert!((y.data()[0] - ((1.0f64 - 4.0) * 3.0 + 4.5)).abs() < 1e-15);
    }

    #[test]
    fn nilpotent_and_geometric_kernels() {
        let ssm = DiscreteSsm::time_invariant(1, 1, vec![0.0], vec![2.0], vec![3.0], None).unwrap();
        assert_eq!(ssm_kernel(&ssm, 4).unwrap().data(), &[6.0, 0.0, 0.0, 0.0]);
        let ssm = DiscreteSsm::time_invariant(1, 1, vec![0.5], vec![1.0], vec![1.0], None).unwrap();
        assert_eq!(
            ssm_kernel(&ssm, 4).unwrap().data(),
            &[1.0, 0.5, 0.25, 0.125]
        );
    }

    #[test]
    fn kernel_rejects_time_varying_params() {
        let ssm =
            DiscreteSsm::new(3, 1, 1, vec![0.5; 3], vec![1.0; 3], vec![1.0; 3], None).unwrap();
        assert!(ssm_kernel(&ssm, 3).is_err());
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let ssm =
            DiscreteSsm::new(3, 1, 1, vec![0.5; 3], vec![1.0; 3], vec![1.0; 3], None).unwrap();
        assert!(ssm_scan_sequential(&ssm, &Tensor::zeros(vec![4, 1])).is_err());
        let k = Tensor::<f64>::zeros(vec![4, 1]);
        assert!(ssm_conv_apply(&k, &Tensor::zeros(vec![5, 1]), None).is_err());
    }

    #[test]
    fn delta_kernel_and_impulse_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::<f64>::randn(vec![8, 2], &mut rng);
        let delta = Tensor::from_fn(vec![8, 2], |i| if i < 2 { 1.0 } else { 0.0 });
        assert_eq!(ssm_conv_apply(&delta, &x, None).unwrap(), x);
        let k = Tensor::<f64>::randn(vec![8, 2], &mut rng);
        assert_eq!(ssm_conv_apply(&k, &delta, None).unwrap(), k);
    }

    #[test]
    fn conv_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (len, d) = (64, 3);
        let k = Tensor::<f64>::randn(vec![len, d], &mut rng);
        let x = Tensor::<f64>::randn(vec![len, d], &mut rng);
        let y = ssm_conv_apply(&k, &x, None).unwrap();
        for ch in 0..d {
            for t in 0..len {
                let mut acc = 0.0;
                for s in 0..=t {
                    acc += x.data()[s * d + ch] * k.data()[(t - s) * d + ch];
                }
                assert!((acc - y.data()[t * d + ch]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn recurrence_matches_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let ssm = random_static(&mut rng, 2, 4);
        let x = Tensor::<f64>::randn(vec![16, 2], &mut rng);
        let seq = ssm_scan_sequential(&ssm, &x).unwrap();
        let conv = ssm_conv_apply(&ssm_kernel(&ssm, 16).unwrap(), &x, ssm.d_skip()).unwrap();
        assert!(seq.max_abs_diff(&conv) <= 1e-10 * seq.max_abs().max(1.0));
    }

    #[test]
    fn causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let ssm = random_static(&mut rng, 2, 3);
        let x = Tensor::<f64>::randn(vec![12, 2], &mut rng);
        let y = ssm_scan_sequential(&ssm, &x).unwrap();
        for cut in 0..12 {
            let mut xc = x.clone();
            xc.data_mut()[(cut + 1) * 2..]
                .iter_mut()
                .for_each(|v| *v = 0.0);
            let yc = ssm_scan_sequential(&ssm, &xc).unwrap();
            assert_eq!(&yc.data()[..(cut + 1) * 2], &y.data()[..(cut + 1) * 2]);
        }
    }
}
