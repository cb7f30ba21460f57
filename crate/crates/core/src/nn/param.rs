use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named model tensor. Trainable params are leaves of the loss; buffers (batch-norm running
/// statistics) are persisted with the weights but never differentiated.
#[derive(Debug, Clone)]
pub struct Param<T> {
    id: u64,
    pub value: Tensor<T>,
    trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            value,
            trainable: true,
        }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Uniform Kaiming fan-in initialization, bound `1/sqrt(fan_in)`.
pub fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(
    dims: Vec<usize>,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(dims, -bound, bound, rng)
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns parameters. Visiting order is stable and defines weight-file order.
pub trait Module<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p)));
        out
    }

    /// Number of learnable scalars (buffers excluded).
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.is_trainable() {
                n += p.numel();
            }
        });
        n
    }
}

impl<T: Scalar> Module<T> for Param<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>)) {
        f(prefix, self)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(prefix, self)
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>)) {
        if let Some(m) = self {
            m.visit(prefix, f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f)
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f)
        }
    }
}

/// Implements [`Module`] for a struct generic over `T` by visiting the listed fields in order.
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::scalar::Scalar> $crate::nn::Module<T> for $ty<T> {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a $crate::nn::Param<T>)) {
                $( $crate::nn::Module::visit(&self.$field, &$crate::nn::param::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut $crate::nn::Param<T>)) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, &$crate::nn::param::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_module;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses batch statistics and reports running-stat updates.
    Train,
    /// Batch norm uses frozen running statistics.
    Eval,
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub mean_id: u64,
    pub var_id: u64,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

/// Per-forward state: the tape, the mode, and the param-to-leaf bindings.
pub struct Ctx<'t, T: Scalar> {
    pub tape: &'t mut Tape<T>,
    pub mode: Mode,
    bound: HashMap<u64, Var>,
    pub bn_updates: Vec<BnUpdate<T>>,
    /// Tokens pushed through selective scans during this forward (all directions counted once).
    pub ssm_tokens: usize,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn new(tape: &'t mut Tape<T>, mode: Mode) -> Self {
        Self {
            tape,
            mode,
            bound: HashMap::new(),
            bn_updates: Vec::new(),
            ssm_tokens: 0,
        }
    }

    pub fn train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Leaf for `p`, created on first use within this forward.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.bound.get(&p.id) {
            return v;
        }
        let v = self.tape.leaf(p.value.clone(), p.trainable);
        self.bound.insert(p.id, v);
        v
    }

    pub fn bound_var(&self, p: &Param<T>) -> Option<Var> {
        self.bound.get(&p.id).copied()
    }

    /// Gradients keyed by param id, for every trainable param used in this forward.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> HashMap<u64, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(&id, &v)| grads.take(v).map(|g| (id, g)))
            .collect()
    }
}

/// Folds recorded batch statistics into the running buffers: `r <- (1 - m) r + m b`.
pub fn apply_bn_updates<T: Scalar>(
    module: &mut impl Module<T>,
    updates: &[BnUpdate<T>],
    momentum: f64,
) -> Result<()> {
    let by_id: HashMap<u64, &[T]> = updates
        .iter()
        .flat_map(|u| {
            [
                (u.mean_id, u.batch_mean.as_slice()),
                (u.var_id, u.batch_var.as_slice()),
            ]
        })
        .collect();
    let m = T::lit(momentum);
    module.visit_mut("", &mut |_, p| {
        if let Some(batch) = by_id.get(&p.id) {
            for (r, &b) in p.value.data_mut().iter_mut().zip(batch.iter()) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    });
    Ok(())
}
