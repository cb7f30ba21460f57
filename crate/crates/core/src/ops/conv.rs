//! Grouped 2D convolution over NCHW tensors. Padding is explicit (zero fill), never inferred.

use rayon::prelude::*;

use crate::error::{ensure_arg, ensure_shape, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dOpts {
    pub const fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Self {
            stride,
            pad,
            groups,
        }
    }

    /// Stride 1, no padding, dense.
    pub const fn pointwise() -> Self {
        Self::new(1, 0, 1)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.pad == 0 && self.groups == 1
    }
}

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub opts: Conv2dOpts,
}

impl ConvGeom {
    pub fn new(x_dims: &[usize], w_dims: &[usize], opts: Conv2dOpts) -> Result<Self> {
        ensure_shape!(
            x_dims.len() == 4,
            "conv2d input must be NCHW, got {:?}",
            x_dims
        );
        ensure_shape!(
            w_dims.len() == 4,
            "conv2d weight must be [cout, cin/groups, kh, kw], got {:?}",
            w_dims
        );
        ensure_arg!(opts.stride > 0, "conv2d stride must be positive");
        ensure_arg!(opts.groups > 0, "conv2d groups must be positive");
        let (n, cin, h, w) = (x_dims[0], x_dims[1], x_dims[2], x_dims[3]);
        let (cout, cin_g, kh, kw) = (w_dims[0], w_dims[1], w_dims[2], w_dims[3]);
        ensure_shape!(
            cin % opts.groups == 0 && cout % opts.groups == 0,
            "channels {cin}->{cout} not divisible by groups {}",
            opts.groups
        );
        ensure_shape!(
            cin_g == cin / opts.groups,
            "weight expects {cin_g} input channels per group, input gives {}",
            cin / opts.groups
        );
        ensure_shape!(
            h + 2 * opts.pad >= kh && w + 2 * opts.pad >= kw,
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * opts.pad,
            w + 2 * opts.pad
        );
        let ho = (h + 2 * opts.pad - kh) / opts.stride + 1;
        let wo = (w + 2 * opts.pad - kw) / opts.stride + 1;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            cin_g,
            cout_g: cout / opts.groups,
            opts,
        })
    }

    pub fn out_dims(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    /// Multiply-accumulates of the forward pass (bias excluded).
    pub fn macs(&self) -> u64 {
        (self.n * self.cout * self.ho * self.wo * self.cin_g * self.kh * self.kw) as u64
    }

    /// Output index range `[lo, hi)` along one axis whose input tap `o*stride + k - pad` is in bounds.
    fn valid_range(&self, k: usize, len_in: usize, len_out: usize) -> (usize, usize) {
        let s = self.opts.stride;
        let p = self.opts.pad;
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        if len_in + p <= k {
            return (0, 0);
        }
        let hi = ((len_in - 1 + p - k) / s + 1).min(len_out);
        (lo.min(hi), hi)
    }
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    opts: Conv2dOpts,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.dims(), w.dims(), opts)?;
    if let Some(b) = b {
        ensure_shape!(
            b.dims() == [g.cout],
            "conv2d bias must be [{}], got {:?}",
            g.cout,
            b.dims()
        );
    }
    let mut out = Tensor::zeros(g.out_dims());
    if g.opts.groups == 1 {
        let cols = im2col(&g, x.data());
        let mut yt = vec![T::zero(); g.cout * g.n * g.ho * g.wo];
        gemm_ab(w.data(), &cols, &mut yt, g.cout, g.cin * g.kh * g.kw);
        from_channel_major(&yt, out.data_mut(), g.n, g.cout, g.ho * g.wo);
    } else {
        let plane_in = g.cin * g.h * g.w;
        let plane_out = g.cout * g.ho * g.wo;
        let (xd, wd) = (x.data(), w.data());
        out.data_mut()
            .par_chunks_mut(plane_out)
            .enumerate()
            .for_each(|(n, o)| conv_plane(&g, &xd[n * plane_in..(n + 1) * plane_in], wd, o));
    }
    if let Some(b) = b {
        let hw = g.ho * g.wo;
        for (i, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
            let bv = b.data()[i % g.cout];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

/// `[N, C, P]` to `[C, N·P]`.
fn to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ci * n + ni) * p..(ci * n + ni + 1) * p]
                .copy_from_slice(&x[(ni * c + ci) * p..(ni * c + ci + 1) * p]);
        }
    }
    out
}

/// `[C, N·P]` to `[N, C, P]`.
fn from_channel_major<T: Scalar>(src: &[T], dst: &mut [T], n: usize, c: usize, p: usize) {
    for ni in 0..n {
        for ci in 0..c {
            dst[(ni * c + ci) * p..(ni * c + ci + 1) * p]
                .copy_from_slice(&src[(ci * n + ni) * p..(ci * n + ni + 1) * p]);
        }
    }
}

/// Dense-conv patch matrix `[cin·kh·kw, N·ho·wo]` with zeros at padded taps.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let p = g.ho * g.wo;
    if g.opts.is_pointwise(g.kh, g.kw) {
        return to_channel_major(x, g.n, g.cin, p);
    }
    let np = g.n * p;
    let mut cols = vec![T::zero(); g.cin * g.kh * g.kw * np];
    let (s, pad) = (g.opts.stride, g.opts.pad);
    cols.par_chunks_mut(np).enumerate().for_each(|(row, col)| {
        let (ci, ky, kx) = (row / (g.kh * g.kw), (row / g.kw) % g.kh, row % g.kw);
        let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
        let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
        for n in 0..g.n {
            let xc = &x[(n * g.cin + ci) * g.h * g.w..(n * g.cin + ci + 1) * g.h * g.w];
            for oy in oy0..oy1 {
                let xrow = &xc[(oy * s + ky - pad) * g.w..];
                let crow = &mut col[n * p + oy * g.wo..n * p + (oy + 1) * g.wo];
                for ox in ox0..ox1 {
                    crow[ox] = xrow[ox * s + kx - pad];
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatter-adds a patch-matrix gradient back to `[N, cin, h, w]`.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], gx: &mut [T]) {
    let p = g.ho * g.wo;
    if g.opts.is_pointwise(g.kh, g.kw) {
        from_channel_major(cols, gx, g.n, g.cin, p);
        return;
    }
    let np = g.n * p;
    let (s, pad) = (g.opts.stride, g.opts.pad);
    let plane = g.h * g.w;
    // one input channel per task keeps the scatter race-free
    let mut per_channel = vec![T::zero(); g.cin * g.n * plane];
    per_channel
        .par_chunks_mut(g.n * plane)
        .enumerate()
        .for_each(|(ci, dst)| {
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                    let col = &cols[((ci * g.kh + ky) * g.kw + kx) * np..][..np];
                    for n in 0..g.n {
                        for oy in oy0..oy1 {
                            let drow = &mut dst[n * plane + (oy * s + ky - pad) * g.w..];
                            let crow = &col[n * p + oy * g.wo..];
                            for ox in ox0..ox1 {
                                drow[ox * s + kx - pad] += crow[ox];
                            }
                        }
                    }
                }
            }
        });
    from_channel_major(&per_channel, gx, g.n, g.cin, plane);
}

/// `out[m, q] += Σ_k a[m, k] · b[k, q]` with `b` of width `out.len() / m`.
fn gemm_ab<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize) {
    let q = out.len() / m.max(1);
    out.par_chunks_mut(q.max(1))
        .enumerate()
        .for_each(|(i, row)| {
            for kk in 0..k {
                let av = a[i * k + kk];
                if av == T::zero() {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&b[kk * q..(kk + 1) * q]) {
                    *o += av * bv;
                }
            }
        });
}

/// `out[k, q] += Σ_m a[m, k] · b[m, q]`.
fn gemm_atb<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize) {
    let q = out.len() / k.max(1);
    out.par_chunks_mut(q.max(1))
        .enumerate()
        .for_each(|(kk, row)| {
            for i in 0..m {
                let av = a[i * k + kk];
                if av == T::zero() {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&b[i * q..(i + 1) * q]) {
                    *o += av * bv;
                }
            }
        });
}

/// `out[m, k] += Σ_q a[m, q] · b[k, q]`.
fn gemm_abt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, q: usize) {
    let k = out.len() / m.max(1);
    out.par_chunks_mut(k.max(1))
        .enumerate()
        .for_each(|(i, row)| {
            let ar = &a[i * q..(i + 1) * q];
            for (kk, o) in row.iter_mut().enumerate() {
                *o += dot(ar, &b[kk * q..(kk + 1) * q]);
            }
        });
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

fn conv_plane<T: Scalar>(g: &ConvGeom, xn: &[T], wd: &[T], o: &mut [T]) {
    let s = g.opts.stride;
    let p = g.opts.pad;
    for co in 0..g.cout {
        let grp = co / g.cout_g;
        let out_c = &mut o[co * g.ho * g.wo..(co + 1) * g.ho * g.wo];
        for cl in 0..g.cin_g {
            let ci = grp * g.cin_g + cl;
            let xc = &xn[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let wv = wd[((co * g.cin_g + cl) * g.kh + ky) * g.kw + kx];
                    let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut out_c[oy * g.wo..(oy + 1) * g.wo];
                        if s == 1 {
                            let ix0 = ox0 + kx - p;
                            for (ov, &xv) in
                                orow[ox0..ox1].iter_mut().zip(&xrow[ix0..ix0 + (ox1 - ox0)])
                            {
                                *ov += wv * xv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * xrow[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the input.
pub fn conv2d_grad_input<T: Scalar>(
    gout: &Tensor<T>,
    w: &Tensor<T>,
    x_dims: &[usize],
    opts: Conv2dOpts,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x_dims, w.dims(), opts)?;
    ensure_shape!(
        gout.dims() == g.out_dims(),
        "conv2d grad_out dims {:?}",
        gout.dims()
    );
    let mut gx = Tensor::zeros(x_dims.to_vec());
    if g.opts.groups == 1 {
        let k = g.cin * g.kh * g.kw;
        let gt = to_channel_major(gout.data(), g.n, g.cout, g.ho * g.wo);
        let mut gcols = vec![T::zero(); k * g.n * g.ho * g.wo];
        gemm_atb(w.data(), &gt, &mut gcols, g.cout, k);
        col2im(&g, &gcols, gx.data_mut());
        return Ok(gx);
    }
    let plane_in = g.cin * g.h * g.w;
    let plane_out = g.cout * g.ho * g.wo;
    let gd = gout.data();
    let wd = w.data();
    let s = g.opts.stride;
    let p = g.opts.pad;
    gx.data_mut()
        .par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(n, gxn)| {
            let gon = &gd[n * plane_out..(n + 1) * plane_out];
            for co in 0..g.cout {
                let grp = co / g.cout_g;
                let go_c = &gon[co * g.ho * g.wo..(co + 1) * g.ho * g.wo];
                for cl in 0..g.cin_g {
                    let ci = grp * g.cin_g + cl;
                    let gxc = &mut gxn[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                    for ky in 0..g.kh {
                        let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
                        for kx in 0..g.kw {
                            let wv = wd[((co * g.cin_g + cl) * g.kh + ky) * g.kw + kx];
                            let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - p;
                                let grow = &go_c[oy * g.wo..(oy + 1) * g.wo];
                                let xrow = &mut gxc[iy * g.w..(iy + 1) * g.w];
                                if s == 1 {
                                    let ix0 = ox0 + kx - p;
                                    for (a, &b) in
                                        xrow[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(&grow[ox0..ox1])
                                    {
                                        *a += wv * b;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        xrow[ox * s + kx - p] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(gx)
}

/// Gradient with respect to the kernel. Batch items are reduced in order, so the result is deterministic.
pub fn conv2d_grad_weight<T: Scalar>(
    gout: &Tensor<T>,
    x: &Tensor<T>,
    w_dims: &[usize],
    opts: Conv2dOpts,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.dims(), w_dims, opts)?;
    ensure_shape!(
        gout.dims() == g.out_dims(),
        "conv2d grad_out dims {:?}",
        gout.dims()
    );
    let mut gw = Tensor::zeros(w_dims.to_vec());
    if g.opts.groups == 1 {
        let q = g.n * g.ho * g.wo;
        let gt = to_channel_major(gout.data(), g.n, g.cout, g.ho * g.wo);
        let cols = im2col(&g, x.data());
        gemm_abt(&gt, &cols, gw.data_mut(), g.cout, q);
        return Ok(gw);
    }
    let plane_in = g.cin * g.h * g.w;
    let plane_out = g.cout * g.ho * g.wo;
    let s = g.opts.stride;
    let p = g.opts.pad;
    let (xd, gd) = (x.data(), gout.data());
    let taps = g.cin_g * g.kh * g.kw;
    gw.data_mut()
        .par_chunks_mut(taps)
        .enumerate()
        .for_each(|(co, gw_c)| {
            let grp = co / g.cout_g;
            for n in 0..g.n {
                let xn = &xd[n * plane_in..(n + 1) * plane_in];
                let go_c =
                    &gd[n * plane_out + co * g.ho * g.wo..n * plane_out + (co + 1) * g.ho * g.wo];
                for cl in 0..g.cin_g {
                    let ci = grp * g.cin_g + cl;
                    let xc = &xn[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                    for ky in 0..g.kh {
                        let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
                        for kx in 0..g.kw {
                            let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                            let mut acc = T::zero();
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - p;
                                let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                                let grow = &go_c[oy * g.wo..(oy + 1) * g.wo];
                                if s == 1 {
                                    let ix0 = ox0 + kx - p;
                                    acc += dot(&grow[ox0..ox1], &xrow[ix0..ix0 + (ox1 - ox0)]);
                                } else {
                                    for ox in ox0..ox1 {
                                        acc += grow[ox] * xrow[ox * s + kx - p];
                                    }
                                }
                            }
                            gw_c[(cl * g.kh + ky) * g.kw + kx] += acc;
                        }
                    }
                }
            }
        });
    Ok(gw)
}

/// Bias gradient: sum of `gout` over batch and space.
pub fn conv2d_grad_bias<T: Scalar>(gout: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = gout.dims4()?;
    let mut gb = Tensor::zeros(vec![c]);
    let hw = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            gb.data_mut()[ci] += gout.data()[base..base + hw].iter().copied().sum::<T>();
        }
    }
    Ok(gb)
}
