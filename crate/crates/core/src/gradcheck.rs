//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_arg, Result};
use crate::nn::{Ctx, Mode, Module};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor added to `|analytic|` in the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / (self.analytic.abs() + REL_FLOOR)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub probes: Vec<Probe>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(Probe::rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err().total_cmp(&b.rel_err()))
    }
}

/// Compares the tape gradient of the scalar `loss(inputs)` with central differences of step
/// `step` at `probes` random `(input, element)` positions.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    probes: usize,
    step: f64,
    seed: u64,
    loss: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    ensure_arg!(
        !inputs.is_empty() && inputs.iter().all(|t| t.numel() > 0),
        "need non-empty inputs"
    );
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = loss(&mut tape, &leaves)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .map(|&v| grads.take(v).expect("leaf gradient"))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = loss(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = inputs.to_vec();
    let mut result = Vec::with_capacity(probes);
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let mut input = 0;
        while flat >= inputs[input].numel() {
            flat -= inputs[input].numel();
            input += 1;
        }
        let orig = work[input].data()[flat];
        work[input].data_mut()[flat] = orig + step;
        let plus = eval(&work)?;
        work[input].data_mut()[flat] = orig - step;
        let minus = eval(&work)?;
        work[input].data_mut()[flat] = orig;
        result.push(Probe {
            input,
            index: flat,
            analytic: analytic[input].data()[flat],
            numeric: (plus - minus) / (2.0 * step),
        });
    }
    Ok(GradCheck { probes: result })
}

/// Options of [`check_param_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct ParamProbeOpts<'a> {
    pub probes: usize,
    pub step: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Entries whose analytic gradient is below this are skipped; their finite differences
    /// would be dominated by rounding.
    pub min_abs: f64,
    /// Probes cycle through these name filters (`""` matches any param), one param each.
    pub groups: &'a [&'a str],
}

/// Checks the gradient of `loss(module)` with respect to single trainable param entries by
/// perturbing a clone of the module. Each probe lands in a distinct param.
pub fn check_param_gradients<M, F>(
    module: &M,
    opts: &ParamProbeOpts<'_>,
    loss: F,
) -> Result<GradCheck>
where
    M: Module<f64> + Clone,
    F: Fn(&M, &mut Ctx<'_, f64>) -> Result<Var>,
{
    ensure_arg!(!opts.groups.is_empty(), "need at least one name filter");
    let eval = |m: &M, grad: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut tape = if grad { Tape::new() } else { Tape::inference() };
        let mut ctx = Ctx::new(&mut tape, opts.mode);
        let out = loss(m, &mut ctx)?;
        let value = ctx.tape.value(out).data()[0];
        if !grad {
            return Ok((value, Vec::new()));
        }
        let mut grads = ctx.tape.backward(out)?;
        let mut by_id = ctx.param_grads(&mut grads);
        let per_param = m
            .named_params()
            .iter()
            .map(|(_, p)| by_id.remove(&p.id()))
            .collect();
        Ok((value, per_param))
    };
    let (_, analytic) = eval(module, true)?;
    let named = module.named_params();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut used = vec![false; named.len()];
    let mut result = Vec::with_capacity(opts.probes);
    let mut attempts = 0;
    while result.len() < opts.probes && attempts < 200 * opts.probes {
        attempts += 1;
        let filter = opts.groups[result.len() % opts.groups.len()];
        let input = rng.random_range(0..named.len());
        let (name, p) = &named[input];
        if used[input] || !p.is_trainable() || !name.contains(filter) {
            continue;
        }
        let Some(g) = &analytic[input] else { continue };
        let index = rng.random_range(0..p.numel());
        if g.data()[index].abs() < opts.min_abs {
            continue;
        }
        let shifted = |delta: f64| -> Result<f64> {
            let mut m = module.clone();
            m.visit_mut("", &mut |n, q| {
                if n == name {
                    q.value.data_mut()[index] += delta;
                }
            });
            Ok(eval(&m, false)?.0)
        };
        let numeric = (shifted(opts.step)? - shifted(-opts.step)?) / (2.0 * opts.step);
        used[input] = true;
        result.push(Probe {
            input,
            index,
            analytic: g.data()[index],
            numeric,
        });
    }
    ensure_arg!(
        result.len() == opts.probes,
        "found {} of {} probes with |gradient| >= {}",
        result.len(),
        opts.probes,
        opts.min_abs
    );
    Ok(GradCheck { probes: result })
}
