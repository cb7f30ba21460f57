//! Fourier diagnostics for feature maps: centered magnitude grids, radial relative
//! log-amplitude curves and low-frequency energy ratios.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{ensure_arg, ensure_shape, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2D DFT of a real `h × w` grid (row-major), unnormalized: `X[k,l] = Σ x[i,j] e^{-2πi(ki/h + lj/w)}`.
pub fn fft2d<T: Scalar>(grid: &[T], h: usize, w: usize) -> Result<Vec<Complex64>> {
    ensure_shape!(
        h >= 1 && w >= 1 && grid.len() == h * w,
        "grid of {} values for {h}x{w}",
        grid.len()
    );
    let mut data: Vec<Complex64> = grid
        .iter()
        .map(|v| Complex64::new(v.as_f64(), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(w).process(&mut data);
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = data[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            data[i * w + j] = col[i];
        }
    }
    Ok(data)
}

/// Moves the zero-frequency bin to `(h/2, w/2)`.
pub fn fftshift<V: Copy>(grid: &[V], h: usize, w: usize) -> Vec<V> {
    let (sh, sw) = (h / 2, w / 2);
    (0..h * w)
        .map(|idx| {
            let (i, j) = (idx / w, idx % w);
            grid[((i + h - sh) % h) * w + (j + w - sw) % w]
        })
        .collect()
}

/// Distance of shifted cell `(i, j)` from the centered zero-frequency bin.
fn center_distance(i: usize, j: usize, h: usize, w: usize) -> f64 {
    let di = i as f64 - (h / 2) as f64;
    let dj = j as f64 - (w / 2) as f64;
    (di * di + dj * dj).sqrt()
}

/// Centered amplitude `|X|` of every `(sample, channel)` map, `[B, C, H, W]`.
pub fn amplitude_spectra<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<f64>> {
    let [b, c, h, w] = features.dims4()?;
    ensure_arg!(b >= 1 && c >= 1, "empty feature batch");
    let hw = h * w;
    let mut out = Vec::with_capacity(features.numel());
    for map in features.data().chunks_exact(hw) {
        let spectrum = fft2d(map, h, w)?;
        out.extend(fftshift(&spectrum, h, w).into_iter().map(|z| z.norm()));
    }
    Tensor::new(vec![b, c, h, w], out)
}

/// Per-channel centered amplitude averaged over the batch, `[C, H, W]`.
pub fn mean_magnitude<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<f64>> {
    let [b, c, h, w] = features.dims4()?;
    let amp = amplitude_spectra(features)?;
    let per = c * h * w;
    let mut out = vec![0.0; per];
    for sample in amp.data().chunks_exact(per) {
        out.iter_mut()
            .zip(sample)
            .for_each(|(o, &v)| *o += v / b as f64);
    }
    Tensor::new(vec![c, h, w], out)
}

/// Radial curve of `log(mean amplitude)` relative to the zero-frequency bin.
///
/// Amplitudes are averaged over samples and channels first, then over annuli: `⌈H/2⌉` bins,
/// bin `k` collecting cells at rounded distance `k` from the center, reported at normalized
/// frequency `k / (H/2)`. Cells beyond the last bin (the corners) are ignored.
pub fn relative_log_amplitude<T: Scalar>(features: &Tensor<T>) -> Result<Vec<(f64, f64)>> {
    let [_, _, h, w] = features.dims4()?;
    ensure_shape!(
        h == w,
        "relative log amplitude needs square maps, got {h}x{w}"
    );
    let mag = mean_magnitude(features)?;
    let c = mag.dims()[0];
    let hw = h * w;
    let bins = h.div_ceil(2);
    let mut sum = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for ch in 0..c {
        for idx in 0..hw {
            let k = center_distance(idx / w, idx % w, h, w).round() as usize;
            if k < bins {
                sum[k] += mag.data()[ch * hw + idx];
                count[k] += 1;
            }
        }
    }
    let log_amp: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| (s / n as f64).ln())
        .collect();
    let half = (h as f64 / 2.0).max(1.0);
    Ok(log_amp
        .iter()
        .enumerate()
        .map(|(k, &v)| (k as f64 / half, v - log_amp[0]))
        .collect())
}

/// Curve value at the bin whose frequency is closest to `f`.
pub fn curve_at(curve: &[(f64, f64)], f: f64) -> Option<f64> {
    curve
        .iter()
        .min_by(|a, b| (a.0 - f).abs().total_cmp(&(b.0 - f).abs()))
        .map(|&(_, v)| v)
}

/// Fraction of spectral energy `Σ|X|²` within normalized radius `rho` of the center, summed over
/// all samples and channels. Radii are normalized by the largest center distance on the grid,
/// so `rho = 1` covers everything.
pub fn low_freq_energy_ratio<T: Scalar>(features: &Tensor<T>, rho: f64) -> Result<f64> {
    ensure_arg!(rho > 0.0 && rho <= 1.0, "rho must lie in (0, 1], got {rho}");
    let [_, _, h, w] = features.dims4()?;
    let amp = amplitude_spectra(features)?;
    let max_dist = (0..h * w)
        .map(|idx| center_distance(idx / w, idx % w, h, w))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let inside: Vec<bool> = (0..h * w)
        .map(|idx| center_distance(idx / w, idx % w, h, w) / max_dist <= rho + 1e-12)
        .collect();
    let (mut low, mut total) = (0.0, 0.0);
    for map in amp.data().chunks_exact(h * w) {
        for (idx, &a) in map.iter().enumerate() {
            let e = a * a;
            total += e;
            if inside[idx] {
                low += e;
            }
        }
    }
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::ZeroEnergy);
    }
    Ok(low / total)
}

/// Writes one binary PGM per channel of the batch-averaged `log(1 + |X|)`, min-max scaled to
/// 0..=255 per channel (a constant channel maps to 0). Files are `channel_NNN.pgm` in `dir`.
pub fn export_magnitude_grid<T: Scalar>(
    features: &Tensor<T>,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let mag = mean_magnitude(features)?;
    let (c, h, w) = (mag.dims()[0], mag.dims()[1], mag.dims()[2]);
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(c);
    for (ch, grid) in mag.data().chunks_exact(h * w).enumerate() {
        let logs: Vec<f64> = grid.iter().map(|v| v.ln_1p()).collect();
        let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend(logs.iter().map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        }));
        let path = dir.join(format!("channel_{ch:03}.pgm"));
        fs::write(&path, bytes)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone)]
pub struct SpectrumReport {
    /// Batch-averaged centered amplitude, `[C, H, W]`.
    pub magnitude: Tensor<f64>,
    pub rla_curve: Vec<(f64, f64)>,
    pub rho: f64,
    pub energy_ratio: f64,
}

impl SpectrumReport {
    pub fn compute<T: Scalar>(features: &Tensor<T>, rho: f64) -> Result<Self> {
        Ok(Self {
            magnitude: mean_magnitude(features)?,
            rla_curve: relative_log_amplitude(features)?,
            rho,
            energy_ratio: low_freq_energy_ratio(features, rho)?,
        })
    }

    /// `freq,delta_log_amp` rows.
    pub fn rla_csv(&self) -> String {
        curve_csv(&self.rla_curve)
    }
}

pub fn curve_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("freq,delta_log_amp\n");
    for (f, v) in curve {
        let _ = writeln!(s, "{f},{v}");
    }
    s
}
