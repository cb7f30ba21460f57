//! Four-direction flattening of a feature grid into token sequences and its adjoint.
//!
//! Sequences are laid out `[batch, len, channels]`. [`cross_scan`] stacks the four directions
//! along the batch axis (direction-major, `[4·B, H·W, C]`) so one shared SSM handles them in a
//! single call; [`cross_merge`] maps each direction back to the grid and sums.

use crate::error::{ensure_shape, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    RowForward,
    RowReverse,
    ColForward,
    ColReverse,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        Self::RowForward,
        Self::RowReverse,
        Self::ColForward,
        Self::ColReverse,
    ];

    /// Grid position `(i, j)` visited at sequence index `p` of an `h × w` grid.
    #[inline]
    pub fn position(self, p: usize, h: usize, w: usize) -> (usize, usize) {
        let last = h * w - 1;
        match self {
            Self::RowForward => (p / w, p % w),
            Self::RowReverse => ((last - p) / w, (last - p) % w),
            Self::ColForward => (p % h, p / h),
            Self::ColReverse => ((last - p) % h, (last - p) / h),
        }
    }
}

/// Flattens `x: [B, C, H, W]` along one direction into `[B, H·W, C]`.
pub fn scan_direction<T: Scalar>(x: &Tensor<T>, dir: ScanDirection) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    let l = h * w;
    let xd = x.data();
    Ok(Tensor::from_fn(vec![b, l, c], |idx| {
        let (n, p, ch) = (idx / (l * c), (idx / c) % l, idx % c);
        let (i, j) = dir.position(p, h, w);
        xd[((n * c + ch) * h + i) * w + j]
    }))
}

/// Inverse of [`scan_direction`]: `[B, H·W, C]` back to `[B, C, H, W]`.
pub fn unscan_direction<T: Scalar>(
    seq: &Tensor<T>,
    dir: ScanDirection,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    ensure_shape!(
        seq.ndim() == 3 && seq.dims()[1] == h * w,
        "sequence dims {:?} for a {h}x{w} grid",
        seq.dims()
    );
    let (b, l, c) = (seq.dims()[0], h * w, seq.dims()[2]);
    let mut out = Tensor::zeros(vec![b, c, h, w]);
    let od = out.data_mut();
    for n in 0..b {
        for p in 0..l {
            let (i, j) = dir.position(p, h, w);
            for ch in 0..c {
                od[((n * c + ch) * h + i) * w + j] = seq.data()[(n * l + p) * c + ch];
            }
        }
    }
    Ok(out)
}

/// All four directions of `x: [B, C, H, W]`, stacked to `[4·B, H·W, C]` in [`ScanDirection::ALL`] order.
pub fn cross_scan<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    let mut data = Vec::with_capacity(4 * x.numel());
    for dir in ScanDirection::ALL {
        data.extend_from_slice(scan_direction(x, dir)?.data());
    }
    Tensor::new(vec![4 * b, h * w, c], data)
}

/// Maps each of the four stacked directions back to the grid and sums them.
pub fn cross_merge<T: Scalar>(seqs: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    ensure_shape!(
        seqs.ndim() == 3 && seqs.dims()[0].is_multiple_of(4) && seqs.dims()[1] == h * w,
        "stacked sequences {:?} for a {h}x{w} grid",
        seqs.dims()
    );
    let (b, l, c) = (seqs.dims()[0] / 4, h * w, seqs.dims()[2]);
    let per_dir = b * l * c;
    let mut out = Tensor::zeros(vec![b, c, h, w]);
    for (d, dir) in ScanDirection::ALL.into_iter().enumerate() {
        let part = Tensor::new(
            vec![b, l, c],
            seqs.data()[d * per_dir..(d + 1) * per_dir].to_vec(),
        )?;
        out.add_assign(&unscan_direction(&part, dir, h, w)?)?;
    }
    Ok(out)
}

impl<T: Scalar> Tape<T> {
    pub fn cross_scan(&mut self, x: Var) -> Result<Var> {
        let y = cross_scan(self.value(x))?;
        self.push(
            "cross_scan",
            y,
            &[x],
            Box::new(|inp, _, g| {
                let [_, _, h, w] = inp[0].dims4()?;
                Ok(vec![Some(cross_merge(g, h, w)?)])
            }),
        )
    }

    pub fn cross_merge(&mut self, seqs: Var, h: usize, w: usize) -> Result<Var> {
        let y = cross_merge(self.value(seqs), h, w)?;
        self.push(
            "cross_merge",
            y,
            &[seqs],
            Box::new(|_, _, g| Ok(vec![Some(cross_scan(g)?)])),
        )
    }
}
