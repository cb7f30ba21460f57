//! Reverse-mode differentiation over an append-only operation tape.
//!
//! Every op pushes its output value together with the handles of its inputs and a backward rule.
//! [`Tape::backward`] walks the tape in reverse, so gradients reach every leaf that was created with
//! `requires_grad`. Leaves that the loss does not depend on keep a zero gradient.

use crate::error::{ensure_shape, Error, Result};
use crate::ops::{self, activation as act, conv, linear as lin, misc, norm, pool, Conv2dOpts};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps `(inputs, output, grad_output)` to one optional gradient per input.
pub type BackwardFn<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Scalar> {
    op: &'static str,
    value: Tensor<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; no backward rules are kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op output. In debug builds a non-finite output is reported as an error.
    pub fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Seeds `d loss / d loss = 1` and accumulates gradients back to the leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure_shape!(
            self.nodes[loss.0].value.numel() == 1,
            "backward needs a scalar loss, got dims {:?}",
            self.nodes[loss.0].value.dims()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.dims().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let input_grads = backward(&inputs, &node.value, &gout)?;
            debug_assert_eq!(
                input_grads.len(),
                node.inputs.len(),
                "backward arity of {}",
                node.op
            );
            for (&j, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[j].requires_grad {
                    continue;
                }
                ensure_shape!(
                    g.dims() == self.nodes[j].value.dims(),
                    "{} produced gradient {:?} for input {:?}",
                    node.op,
                    g.dims(),
                    self.nodes[j].value.dims()
                );
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        // leaf gradients: reachable leaves hold their sum, unreachable ones are zero
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (n.inputs.is_empty() && n.requires_grad, g) {
                (true, Some(g)) => Some(g),
                (true, None) => Some(Tensor::zeros(n.value.dims().to_vec())),
                (false, _) => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with `requires_grad`; `None` for constants and intermediates.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn unary_grad<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, d: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_fn(x.dims().to_vec(), |i| g.data()[i] * d(x.data()[i]))
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        self.push(
            "add",
            y,
            &[a, b],
            Box::new(|_, _, g| Ok(vec![Some(g.clone()), Some(g.clone())])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        self.push(
            "sub",
            y,
            &[a, b],
            Box::new(|_, _, g| Ok(vec![Some(g.clone()), Some(g.scale(-T::one()))])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(
            "mul",
            y,
            &[a, b],
            Box::new(|inp, _, g| {
                Ok(vec![
                    Some(g.zip_map(inp[1], |g, b| g * b)?),
                    Some(g.zip_map(inp[0], |g, a| g * a)?),
                ])
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let y = self.value(a).scale(s);
        self.push(
            "scale",
            y,
            &[a],
            Box::new(move |_, _, g| Ok(vec![Some(g.scale(s))])),
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(
            "sum",
            y,
            &[a],
            Box::new(|inp, _, g| {
                Ok(vec![Some(Tensor::full(
                    inp[0].dims().to_vec(),
                    g.data()[0],
                ))])
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::lit(self.value(a).numel() as f64);
        let s = self.sum(a)?;
        self.scale(s, T::one() / n)
    }

    pub fn reshape(&mut self, a: Var, dims: Vec<usize>) -> Result<Var> {
        let y = self.value(a).clone().reshape(dims)?;
        self.push(
            "reshape",
            y,
            &[a],
            Box::new(|inp, _, g| Ok(vec![Some(g.clone().reshape(inp[0].dims().to_vec())?)])),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(act::gelu);
        self.push(
            "gelu",
            y,
            &[a],
            Box::new(|inp, _, g| Ok(vec![Some(unary_grad(inp[0], g, act::gelu_grad))])),
        )
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(act::silu);
        self.push(
            "silu",
            y,
            &[a],
            Box::new(|inp, _, g| Ok(vec![Some(unary_grad(inp[0], g, act::silu_grad))])),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(act::softplus);
        self.push(
            "softplus",
            y,
            &[a],
            Box::new(|inp, _, g| Ok(vec![Some(unary_grad(inp[0], g, act::softplus_grad))])),
        )
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), opts)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let need_x = self.requires_grad(x);
        self.push(
            "conv2d",
            y,
            &inputs,
            Box::new(move |inp, _, g| {
                let gx = if need_x {
                    Some(conv::conv2d_grad_input(g, inp[1], inp[0].dims(), opts)?)
                } else {
                    None
                };
                let mut out = vec![
                    gx,
                    Some(conv::conv2d_grad_weight(g, inp[0], inp[1].dims(), opts)?),
                ];
                if inp.len() == 3 {
                    out.push(Some(conv::conv2d_grad_bias(g)?));
                }
                Ok(out)
            }),
        )
    }

    pub fn avg_pool2d(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = pool::avg_pool2d(self.value(x), r)?;
        self.push(
            "avg_pool2d",
            y,
            &[x],
            Box::new(move |_, _, g| Ok(vec![Some(pool::avg_pool2d_grad(g, r)?)])),
        )
    }

    pub fn upsample_nearest(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = pool::upsample_nearest(self.value(x), r)?;
        self.push(
            "upsample_nearest",
            y,
            &[x],
            Box::new(move |_, _, g| Ok(vec![Some(pool::upsample_nearest_grad(g, r)?)])),
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = lin::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "linear",
            y,
            &inputs,
            Box::new(|inp, _, g| {
                let (gx, gw, gb) = lin::linear_grad(g, inp[0], inp[1]);
                let mut out = vec![Some(gx), Some(gw)];
                if inp.len() == 3 {
                    out.push(Some(gb));
                }
                Ok(out)
            }),
        )
    }

    pub fn layer_norm_channels(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (y, stats) =
            norm::layer_norm_channels(self.value(x), self.value(gain), self.value(bias), eps)?;
        self.push(
            "layer_norm",
            y,
            &[x, gain, bias],
            Box::new(move |inp, _, g| {
                let (gx, gg, gb) = norm::layer_norm_channels_grad(g, inp[1], &stats)?;
                Ok(vec![Some(gx), Some(gg), Some(gb)])
            }),
        )
    }

    /// Training-mode batch norm. Also returns the batch mean and biased variance per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (y, stats) =
            norm::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let (mean, var) = (stats.mean.clone(), stats.var.clone());
        let v = self.push(
            "batch_norm_train",
            y,
            &[x, gamma, beta],
            Box::new(move |inp, _, g| {
                let (gx, gg, gb) = norm::batch_norm_train_grad(g, inp[1], &stats)?;
                Ok(vec![Some(gx), Some(gg), Some(gb)])
            }),
        )?;
        Ok((v, mean, var))
    }

    /// Eval-mode batch norm with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let [_, c, h, w] = xv.dims4()?;
        ensure_shape!(
            self.dims(gamma) == [c] && running_mean.dims() == [c] && running_var.dims() == [c],
            "batch norm params for {c} channels"
        );
        let mean = running_mean.data().to_vec();
        let inv_std: Vec<T> = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + T::lit(eps)).sqrt())
            .collect();
        let hw = h * w;
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let y = Tensor::from_fn(xv.dims().to_vec(), |i| {
            let ci = (i / hw) % c;
            (xv.data()[i] - mean[ci]) * inv_std[ci] * gd[ci] + bd[ci]
        });
        self.push(
            "batch_norm_eval",
            y,
            &[x, gamma, beta],
            Box::new(move |inp, _, g| {
                let (x, gamma) = (inp[0], inp[1]);
                let mut gx = Tensor::zeros(x.dims().to_vec());
                let mut gg = Tensor::zeros(vec![c]);
                let mut gb = Tensor::zeros(vec![c]);
                for (i, &gv) in g.data().iter().enumerate() {
                    let ci = (i / hw) % c;
                    gx.data_mut()[i] = gv * inv_std[ci] * gamma.data()[ci];
                    gg.data_mut()[ci] += gv * (x.data()[i] - mean[ci]) * inv_std[ci];
                    gb.data_mut()[ci] += gv;
                }
                Ok(vec![Some(gx), Some(gg), Some(gb)])
            }),
        )
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let y = misc::slice_channels(self.value(x), start, end)?;
        self.push(
            "slice_channels",
            y,
            &[x],
            Box::new(move |inp, _, g| {
                let [n, c, h, w] = inp[0].dims4()?;
                let hw = h * w;
                let k = end - start;
                let mut gx = Tensor::zeros(vec![n, c, h, w]);
                for ni in 0..n {
                    gx.data_mut()[(ni * c + start) * hw..(ni * c + end) * hw]
                        .copy_from_slice(&g.data()[ni * k * hw..(ni + 1) * k * hw]);
                }
                Ok(vec![Some(gx)])
            }),
        )
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = misc::concat_channels(&values)?;
        self.push(
            "concat_channels",
            y,
            parts,
            Box::new(|inp, _, g| {
                let mut start = 0;
                let mut out = Vec::with_capacity(inp.len());
                for p in inp {
                    let c = p.dims()[1];
                    out.push(Some(misc::slice_channels(g, start, start + c)?));
                    start += c;
                }
                Ok(out)
            }),
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = misc::global_avg_pool(self.value(x))?;
        self.push(
            "global_avg_pool",
            y,
            &[x],
            Box::new(|inp, _, g| {
                let [_, _, h, w] = inp[0].dims4()?;
                let inv = T::one() / T::lit((h * w) as f64);
                let hw = h * w;
                Ok(vec![Some(Tensor::from_fn(inp[0].dims().to_vec(), |i| {
                    g.data()[i / hw] * inv
                }))])
            }),
        )
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = misc::cross_entropy(self.value(logits), labels)?;
        let labels = labels.to_vec();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |_, _, g| {
                let k = probs.dims()[1];
                let scale = g.data()[0] / T::lit(labels.len() as f64);
                let mut gl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    gl.data_mut()[i * k + l] -= T::one();
                }
                Ok(vec![Some(gl.scale(scale))])
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gives_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::randn(vec![3, 4], &mut rng), true);
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(vec![3, 4]));
    }

    #[test]
    fn half_square_norm_gives_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::randn(vec![5], &mut rng);
        let x = tape.leaf(xv.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().max_abs_diff(&xv) < 1e-15);
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![2]), true);
        let unused = tape.leaf(Tensor::ones(vec![3]), true);
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(vec![3]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![2]), true);
        let c = tape.constant(Tensor::full(vec![2], 3.0));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::ones(vec![2]), true);
        let s = tape.sum(x).unwrap();
        assert!(!tape.requires_grad(s));
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![1], f64::MAX), true);
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }
}
