//! Synthetic 10-class grating images.
//!
//! Class `k` is a sinusoidal grating at orientation `(k mod 5)·36°` with 3 (classes 0-4) or 6
//! (classes 5-9) cycles per image side. Phase is uniform, contrast varies and every channel gets
//! independent Gaussian noise. The random phase averages every class to zero in pixel space, so
//! raw pixels carry no linear class signal while the spectrum separates classes cleanly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::io::{read_tvmt, write_tvmt};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetConfig {
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub channels: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 10,
            per_class: 100,
            size: 32,
            channels: 3,
            noise: 0.5,
        }
    }
}

impl ToyDatasetConfig {
    /// `(orientation in radians, cycles per side)` of class `k`.
    pub fn signature(k: usize) -> (f64, f64) {
        let theta = ((k % 5) as f64 * 36.0).to_radians();
        let cycles = if (k / 5).is_multiple_of(2) { 3.0 } else { 6.0 };
        (theta, cycles)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    /// `[N, C, S, S]`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> [usize; 3] {
        let d = self.images.dims();
        [d[1], d[2], d[3]]
    }

    /// Stacks the samples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let [c, h, w] = self.image_dims();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch dims");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn class_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Samples are interleaved by class (`label = i mod classes`).
pub fn generate_dataset(cfg: &ToyDatasetConfig) -> Result<ToyDataset> {
    ensure_arg!(
        cfg.classes >= 1 && cfg.per_class >= 1 && cfg.size >= 1 && cfg.channels >= 1,
        "dataset extents must be positive"
    );
    ensure_arg!(cfg.noise >= 0.0, "noise must be non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.classes * cfg.per_class;
    let s = cfg.size;
    let mut data = Vec::with_capacity(n * cfg.channels * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % cfg.classes;
        let (theta, cycles) = ToyDatasetConfig::signature(k);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let contrast = rng.random_range(0.7..1.3);
        let (kx, ky) = (
            theta.cos() * cycles / s as f64,
            theta.sin() * cycles / s as f64,
        );
        for _ in 0..cfg.channels {
            for y in 0..s {
                for x in 0..s {
                    let g = (std::f64::consts::TAU * (kx * x as f64 + ky * y as f64) + phase).sin();
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    data.push((contrast * g + cfg.noise * noise) as f32);
                }
            }
        }
        labels.push(k);
    }
    Ok(ToyDataset {
        images: Tensor::new(vec![n, cfg.channels, s, s], data)?,
        labels,
    })
}

/// Writes `sample_NNNNN.tvmt` per image plus `labels.csv` (`file,label`).
pub fn write_dataset(ds: &ToyDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let [c, h, w] = ds.image_dims();
    let mut csv = String::from("file,label\n");
    for i in 0..ds.len() {
        let (img, _) = ds.batch(&[i]);
        let name = format!("sample_{i:05}.tvmt");
        write_tvmt(dir.join(&name), &img.reshape(vec![c, h, w])?)?;
        let _ = writeln!(csv, "{name},{}", ds.labels[i]);
    }
    fs::write(dir.join("labels.csv"), csv)?;
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<ToyDataset> {
    let dir = dir.as_ref();
    let csv = fs::read_to_string(dir.join("labels.csv"))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dims: Option<Vec<usize>> = None;
    for (lineno, line) in csv.lines().enumerate().skip(1) {
        let (file, label) = line.split_once(',').ok_or_else(|| {
            Error::Format(format!(
                "labels.csv line {}: expected `file,label`",
                lineno + 1
            ))
        })?;
        let label = label.trim().parse().map_err(|_| {
            Error::Format(format!(
                "labels.csv line {}: bad label `{label}`",
                lineno + 1
            ))
        })?;
        let img: Tensor<f32> = read_tvmt(dir.join(file))?;
        match &dims {
            None => dims = Some(img.dims().to_vec()),
            Some(d) if d.as_slice() != img.dims() => {
                return Err(Error::Format(format!(
                    "{file}: dims {:?} differ from {d:?}",
                    img.dims()
                )))
            }
            Some(_) => {}
        }
        data.extend_from_slice(img.data());
        labels.push(label);
    }
    let d = dims.ok_or_else(|| Error::Format("labels.csv lists no samples".into()))?;
    ensure_arg!(d.len() == 3, "samples must be [C, H, W], got {d:?}");
    Ok(ToyDataset {
        images: Tensor::new(vec![labels.len(), d[0], d[1], d[2]], data)?,
        labels,
    })
}
