//! Wall-clock scaling of the selective scan.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_arg, Result};
use crate::ssm::{s6_forward, S6};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub channels: usize,
    pub state: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            state: 16,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    /// Median over the repeats.
    pub seconds: f64,
}

/// Median wall time of `s6_forward` at each sequence length.
pub fn bench_scan(lengths: &[usize], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    ensure_arg!(
        cfg.repeats > 0 && lengths.iter().all(|&l| l > 0),
        "lengths and repeats must be positive"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = S6::<f64>::new(
        cfg.channels,
        cfg.state,
        cfg.channels.div_ceil(16),
        true,
        &mut rng,
    )
    .snapshot();
    let inputs: Vec<Tensor<f64>> = lengths
        .iter()
        .map(|&len| Tensor::randn(vec![len, cfg.channels], &mut rng))
        .collect();
    for x in &inputs {
        s6_forward(x, &params)?;
    }
    // lengths are interleaved within each repeat so clock drift hits them all alike
    let mut times = vec![Vec::with_capacity(cfg.repeats); lengths.len()];
    for _ in 0..cfg.repeats {
        for (x, t) in inputs.iter().zip(&mut times) {
            let start = Instant::now();
            s6_forward(x, &params)?;
            t.push(start.elapsed().as_secs_f64());
        }
    }
    let rows = lengths
        .iter()
        .zip(&mut times)
        .map(|(&len, t)| {
            t.sort_by(f64::total_cmp);
            BenchRow {
                len,
                seconds: t[t.len() / 2],
            }
        })
        .collect();
    Ok(rows)
}

/// `time(L_{i+1}) / time(L_i)` for successive rows.
pub fn scaling_ratios(rows: &[BenchRow]) -> Vec<f64> {
    rows.windows(2)
        .map(|w| w[1].seconds / w[0].seconds)
        .collect()
}

/// CSV with header `len,seconds,ratio`; the first row's ratio is empty.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("len,seconds,ratio\n");
    for (i, r) in rows.iter().enumerate() {
        let ratio = if i == 0 {
            String::new()
        } else {
            format!("{:.4}", r.seconds / rows[i - 1].seconds)
        };
        let _ = writeln!(s, "{},{:.9},{ratio}", r.len, r.seconds);
    }
    s
}
