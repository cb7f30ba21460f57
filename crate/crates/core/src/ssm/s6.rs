//! Selective (input-dependent) SSM.
//!
//! Per token `x_t ∈ R^E`: `B_t = W_B x_t`, `C_t = W_C x_t`,
//! `Δ_t = softplus(W_up W_down x_t + b_Δ)`, then each channel `e` is discretized with its own
//! step `Δ_t[e]` and advanced by the diagonal recurrence. `A = -exp(A_log)` keeps every pole
//! strictly inside the unit circle.

use rand::Rng;

use crate::error::{ensure_shape, Result};
use crate::nn::param::{impl_module, kaiming_uniform};
use crate::nn::{Ctx, Param};
use crate::ops::activation::{softplus, softplus_inv};
use crate::ops::linear;
use crate::scalar::Scalar;
use crate::ssm::zoh::{phi, phi_grad, zoh};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Plain-tensor view of one selective SSM's parameters.
#[derive(Debug, Clone)]
pub struct SsmParams<T> {
    /// `[E, N]`
    pub a_log: Tensor<T>,
    /// `[N, E]`
    pub b_proj: Tensor<T>,
    /// `[N, E]`
    pub c_proj: Tensor<T>,
    /// `[R, E]`
    pub dt_down: Tensor<T>,
    /// `[E, R]`
    pub dt_up: Tensor<T>,
    /// `[E]`
    pub dt_bias: Tensor<T>,
    /// `[E]`; `None` disables the skip path.
    pub d_skip: Option<Tensor<T>>,
}

impl<T: Scalar> SsmParams<T> {
    pub fn channels(&self) -> usize {
        self.a_log.dims()[0]
    }

    pub fn state(&self) -> usize {
        self.a_log.dims()[1]
    }

    /// Continuous diagonal `A = -exp(A_log)`, `[E, N]`.
    pub fn a(&self) -> Tensor<T> {
        self.a_log.map(|v| -v.exp())
    }
}

/// Reference evaluation of one sequence `x: [L, E]`: projections, then per token and channel a
/// ZOH discretization through [`zoh`] followed by one recurrence step. State memory is
/// `O(E·N)`, so time is linear in `L`. Not differentiable; used as an oracle.
pub fn s6_forward<T: Scalar>(x: &Tensor<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    let (e, n) = (p.channels(), p.state());
    ensure_shape!(
        x.ndim() == 2 && x.dims()[1] == e,
        "s6 input {:?} for {e} channels",
        x.dims()
    );
    let len = x.dims()[0];
    let bt = linear(x, &p.b_proj, None)?;
    let ct = linear(x, &p.c_proj, None)?;
    let dt = linear(&linear(x, &p.dt_down, None)?, &p.dt_up, Some(&p.dt_bias))?.map(softplus);
    let a = p.a();
    let mut h = vec![T::zero(); e * n];
    let mut y = Tensor::zeros(vec![len, e]);
    for t in 0..len {
        let b_row = &bt.data()[t * n..(t + 1) * n];
        let c_row = &ct.data()[t * n..(t + 1) * n];
        for ch in 0..e {
            let xv = x.data()[t * e + ch];
            let step = dt.data()[t * e + ch];
            let hs = &mut h[ch * n..(ch + 1) * n];
            let mut acc = T::zero();
            for k in 0..n {
                let (ab, bb) = zoh(a.data()[ch * n + k], b_row[k], step);
                hs[k] = ab * hs[k] + bb * xv;
                acc += c_row[k] * hs[k];
            }
            if let Some(d) = &p.d_skip {
                acc += d.data()[ch] * xv;
            }
            y.data_mut()[t * e + ch] = acc;
        }
    }
    Ok(y)
}

/// Shapes of a batched selective scan.
#[derive(Debug, Clone, Copy)]
struct ScanDims {
    batch: usize,
    len: usize,
    channels: usize,
    state: usize,
}

impl ScanDims {
    fn check<T: Scalar>(
        u: &Tensor<T>,
        delta: &Tensor<T>,
        a_log: &Tensor<T>,
        bm: &Tensor<T>,
        cm: &Tensor<T>,
        d_skip: Option<&Tensor<T>>,
    ) -> Result<Self> {
        ensure_shape!(
            u.ndim() == 3,
            "scan input must be [batch, len, channels], got {:?}",
            u.dims()
        );
        let (batch, len, channels) = (u.dims()[0], u.dims()[1], u.dims()[2]);
        ensure_shape!(
            delta.dims() == u.dims(),
            "step dims {:?} vs input {:?}",
            delta.dims(),
            u.dims()
        );
        ensure_shape!(
            a_log.ndim() == 2 && a_log.dims()[0] == channels,
            "A_log dims {:?} for {channels} channels",
            a_log.dims()
        );
        let state = a_log.dims()[1];
        ensure_shape!(
            bm.dims() == [batch, len, state] && cm.dims() == [batch, len, state],
            "B/C dims {:?}/{:?}, expected [{batch}, {len}, {state}]",
            bm.dims(),
            cm.dims()
        );
        if let Some(d) = d_skip {
            ensure_shape!(d.dims() == [channels], "skip dims {:?}", d.dims());
        }
        Ok(Self {
            batch,
            len,
            channels,
            state,
        })
    }
}

/// Fused selective scan: per-token ZOH plus recurrence, `h_0 = 0`.
/// `u, delta: [B, L, E]`, `a_log: [E, N]`, `bm, cm: [B, L, N]`, `d_skip: [E]`.
pub fn selective_scan<T: Scalar>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    bm: &Tensor<T>,
    cm: &Tensor<T>,
    d_skip: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let s = ScanDims::check(u, delta, a_log, bm, cm, d_skip)?;
    let (e, n) = (s.channels, s.state);
    let a: Vec<T> = a_log.data().iter().map(|v| -v.exp()).collect();
    let mut y = Tensor::zeros(u.dims().to_vec());
    let mut h = vec![T::zero(); n];
    for b in 0..s.batch {
        for ch in 0..e {
            h.iter_mut().for_each(|v| *v = T::zero());
            let skip = d_skip.map_or(T::zero(), |d| d.data()[ch]);
            let a_row = &a[ch * n..(ch + 1) * n];
            for t in 0..s.len {
                let tok = b * s.len + t;
                let ut = u.data()[tok * e + ch];
                let dt = delta.data()[tok * e + ch];
                let b_row = &bm.data()[tok * n..(tok + 1) * n];
                let c_row = &cm.data()[tok * n..(tok + 1) * n];
                let mut acc = T::zero();
                for k in 0..n {
                    let z = dt * a_row[k];
                    h[k] = z.exp() * h[k] + dt * phi(z) * b_row[k] * ut;
                    acc += c_row[k] * h[k];
                }
                y.data_mut()[tok * e + ch] = acc + skip * ut;
            }
        }
    }
    Ok(y)
}

/// Gradients of [`selective_scan`]: `(du, d_delta, d_a_log, d_bm, d_cm, d_skip)`.
#[allow(clippy::type_complexity)]
pub fn selective_scan_grad<T: Scalar>(
    gy: &Tensor<T>,
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    bm: &Tensor<T>,
    cm: &Tensor<T>,
    d_skip: Option<&Tensor<T>>,
) -> Result<(
    Tensor<T>,
    Tensor<T>,
    Tensor<T>,
    Tensor<T>,
    Tensor<T>,
    Option<Tensor<T>>,
)> {
    let s = ScanDims::check(u, delta, a_log, bm, cm, d_skip)?;
    ensure_shape!(gy.dims() == u.dims(), "scan grad dims {:?}", gy.dims());
    let (e, n, len) = (s.channels, s.state, s.len);
    let a: Vec<T> = a_log.data().iter().map(|v| -v.exp()).collect();
    let mut du = Tensor::zeros(u.dims().to_vec());
    let mut ddelta = Tensor::zeros(u.dims().to_vec());
    let mut da = vec![T::zero(); e * n];
    let mut dbm = Tensor::zeros(bm.dims().to_vec());
    let mut dcm = Tensor::zeros(cm.dims().to_vec());
    let mut dskip = d_skip.map(|_| Tensor::zeros(vec![e]));
    // hidden states of the current (batch, channel) row, [len + 1, N] with h_0 = 0 in row 0
    let mut hs = vec![T::zero(); (len + 1) * n];
    let mut carry = vec![T::zero(); n];
    for b in 0..s.batch {
        for ch in 0..e {
            let a_row = &a[ch * n..(ch + 1) * n];
            for t in 0..len {
                let tok = b * len + t;
                let ut = u.data()[tok * e + ch];
                let dt = delta.data()[tok * e + ch];
                for k in 0..n {
                    let z = dt * a_row[k];
                    hs[(t + 1) * n + k] =
                        z.exp() * hs[t * n + k] + dt * phi(z) * bm.data()[tok * n + k] * ut;
                }
            }
            let skip = d_skip.map_or(T::zero(), |d| d.data()[ch]);
            carry.iter_mut().for_each(|v| *v = T::zero());
            for t in (0..len).rev() {
                let tok = b * len + t;
                let g = gy.data()[tok * e + ch];
                let ut = u.data()[tok * e + ch];
                let dt = delta.data()[tok * e + ch];
                let mut du_t = g * skip;
                if let Some(ds) = dskip.as_mut() {
                    ds.data_mut()[ch] += g * ut;
                }
                let mut ddt = T::zero();
                for k in 0..n {
                    let ak = a_row[k];
                    let z = dt * ak;
                    let abar = z.exp();
                    let bk = bm.data()[tok * n + k];
                    let ph = phi(z);
                    let h_t = hs[(t + 1) * n + k];
                    let h_prev = hs[t * n + k];
                    dcm.data_mut()[tok * n + k] += g * h_t;
                    let dh = carry[k] + g * cm.data()[tok * n + k];
                    let d_abar = dh * h_prev;
                    let d_bbar = dh * ut;
                    du_t += dh * dt * ph * bk;
                    carry[k] = dh * abar;
                    // Ā = e^{ΔA};  B̄ = Δ φ(ΔA) B  ⇒  ∂B̄/∂Δ = e^{ΔA} B,  ∂B̄/∂A = Δ² ψ(ΔA) B
                    ddt += d_abar * ak * abar + d_bbar * abar * bk;
                    da[ch * n + k] += d_abar * dt * abar + d_bbar * bk * dt * dt * phi_grad(z);
                    dbm.data_mut()[tok * n + k] += d_bbar * dt * ph;
                }
                du.data_mut()[tok * e + ch] = du_t;
                ddelta.data_mut()[tok * e + ch] = ddt;
            }
        }
    }
    // A = -exp(A_log) ⇒ dA/dA_log = A
    let da_log = Tensor::new(
        a_log.dims().to_vec(),
        da.iter().zip(&a).map(|(&g, &av)| g * av).collect(),
    )?;
    Ok((du, ddelta, da_log, dbm, dcm, dskip))
}

impl<T: Scalar> Tape<T> {
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a_log: Var,
        bm: Var,
        cm: Var,
        d_skip: Option<Var>,
    ) -> Result<Var> {
        let y = selective_scan(
            self.value(u),
            self.value(delta),
            self.value(a_log),
            self.value(bm),
            self.value(cm),
            d_skip.map(|d| self.value(d)),
        )?;
        let mut inputs = vec![u, delta, a_log, bm, cm];
        inputs.extend(d_skip);
        self.push(
            "selective_scan",
            y,
            &inputs,
            Box::new(|inp, _, g| {
                let (du, dd, da, db, dc, ds) = selective_scan_grad(
                    g,
                    inp[0],
                    inp[1],
                    inp[2],
                    inp[3],
                    inp[4],
                    inp.get(5).copied(),
                )?;
                let mut out = vec![Some(du), Some(dd), Some(da), Some(db), Some(dc)];
                if inp.len() == 6 {
                    out.push(ds);
                }
                Ok(out)
            }),
        )
    }
}

/// Trainable selective SSM over `E` channels with state size `N` and step rank `R`.
#[derive(Debug, Clone)]
pub struct S6<T> {
    pub b_proj: Param<T>,
    pub c_proj: Param<T>,
    pub dt_down: Param<T>,
    pub dt_up: Param<T>,
    pub dt_bias: Param<T>,
    pub a_log: Param<T>,
    pub d_skip: Option<Param<T>>,
}
impl_module!(S6 {
    b_proj,
    c_proj,
    dt_down,
    dt_up,
    dt_bias,
    a_log,
    d_skip
});

/// Range of initial step sizes; biases are drawn log-uniformly so `softplus(b_Δ)` lands inside it.
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

impl<T: Scalar> S6<T> {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        state: usize,
        dt_rank: usize,
        skip: bool,
        rng: &mut R,
    ) -> Self {
        let (lo, hi) = (DT_INIT_RANGE.0.ln(), DT_INIT_RANGE.1.ln());
        let dt_bias = Tensor::from_fn(vec![channels], |_| {
            T::lit(softplus_inv(rng.random_range(lo..hi).exp()))
        });
        let up_bound = 1.0 / (dt_rank as f64).sqrt();
        Self {
            b_proj: Param::new(kaiming_uniform(vec![state, channels], channels, rng)),
            c_proj: Param::new(kaiming_uniform(vec![state, channels], channels, rng)),
            dt_down: Param::new(kaiming_uniform(vec![dt_rank, channels], channels, rng)),
            dt_up: Param::new(Tensor::uniform(
                vec![channels, dt_rank],
                -up_bound,
                up_bound,
                rng,
            )),
            dt_bias: Param::new(dt_bias),
            a_log: Param::new(Tensor::from_fn(vec![channels, state], |i| {
                T::lit(((i % state) + 1) as f64).ln()
            })),
            d_skip: skip.then(|| Param::new(Tensor::ones(vec![channels]))),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.value.dims()[0]
    }

    pub fn state(&self) -> usize {
        self.a_log.value.dims()[1]
    }

    pub fn dt_rank(&self) -> usize {
        self.dt_down.value.dims()[0]
    }

    pub fn snapshot(&self) -> SsmParams<T> {
        SsmParams {
            a_log: self.a_log.value.clone(),
            b_proj: self.b_proj.value.clone(),
            c_proj: self.c_proj.value.clone(),
            dt_down: self.dt_down.value.clone(),
            dt_up: self.dt_up.value.clone(),
            dt_bias: self.dt_bias.value.clone(),
            d_skip: self.d_skip.as_ref().map(|d| d.value.clone()),
        }
    }

    /// Scans a batch of sequences `u: [B, L, E]`.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, u: Var) -> Result<Var> {
        let dims = ctx.tape.dims(u).to_vec();
        ensure_shape!(
            dims.len() == 3 && dims[2] == self.channels(),
            "s6 input {:?} for {} channels",
            dims,
            self.channels()
        );
        let (b, l, e, n) = (dims[0], dims[1], dims[2], self.state());
        let flat = ctx.tape.reshape(u, vec![b * l, e])?;
        let (wb, wc, wd, wu, bias, a_log) = (
            ctx.param(&self.b_proj),
            ctx.param(&self.c_proj),
            ctx.param(&self.dt_down),
            ctx.param(&self.dt_up),
            ctx.param(&self.dt_bias),
            ctx.param(&self.a_log),
        );
        let skip = self.d_skip.as_ref().map(|d| ctx.param(d));
        let tape = &mut *ctx.tape;
        let bm = tape.linear(flat, wb, None)?;
        let bm = tape.reshape(bm, vec![b, l, n])?;
        let cm = tape.linear(flat, wc, None)?;
        let cm = tape.reshape(cm, vec![b, l, n])?;
        let low = tape.linear(flat, wd, None)?;
        let dt = tape.linear(low, wu, Some(bias))?;
        let delta = tape.softplus(dt)?;
        let delta = tape.reshape(delta, vec![b, l, e])?;
        tape.selective_scan(u, delta, a_log, bm, cm, skip)
    }

    /// Multiply-accumulates for `tokens` tokens: projections plus `3·E·N` per token for the
    /// recurrence (`Ā h`, `B̄ x`, `C h`).
    pub fn macs(&self, tokens: usize) -> u64 {
        let (e, n, r) = (self.channels(), self.state(), self.dt_rank());
        (tokens * (e * (2 * n + r) + r * e + 3 * e * n)) as u64
    }
}
