//! Fixed linear probes: multinomial logistic regression on raw pixels or on spectral magnitudes.

use crate::error::{ensure_arg, Result};
use crate::harness::dataset::ToyDataset;
use crate::ops::cross_entropy;
use crate::ops::linear::{linear, linear_grad};
use crate::spectral::{fft2d, fftshift};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

/// Flattened pixels, `[N, C·H·W]`.
pub fn pixel_features(ds: &ToyDataset) -> Tensor<f64> {
    let n = ds.len();
    let per = ds.images.numel() / n.max(1);
    ds.images
        .cast::<f64>()
        .reshape(vec![n, per])
        .expect("pixel dims")
}

/// `log(1 + |X|)` of the centered spectrum of the channel-mean image, `[N, H·W]`.
pub fn spectral_features(ds: &ToyDataset) -> Result<Tensor<f64>> {
    let [c, h, w] = ds.image_dims();
    let n = ds.len();
    let mut out = Vec::with_capacity(n * h * w);
    for img in ds.images.data().chunks_exact(c * h * w) {
        let mean: Vec<f64> = (0..h * w)
            .map(|p| (0..c).map(|ch| img[ch * h * w + p] as f64).sum::<f64>() / c as f64)
            .collect();
        let spectrum = fftshift(&fft2d(&mean, h, w)?, h, w);
        out.extend(spectrum.iter().map(|z| z.norm().ln_1p()));
    }
    Tensor::new(vec![n, h * w], out)
}

#[derive(Debug, Clone)]
pub struct LinearProbe {
    weight: Tensor<f64>,
    bias: Tensor<f64>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LinearProbe {
    /// Full-batch gradient descent on standardized features from zero weights.
    pub fn fit(
        features: &Tensor<f64>,
        labels: &[usize],
        classes: usize,
        cfg: &ProbeConfig,
    ) -> Result<Self> {
        ensure_arg!(
            features.ndim() == 2 && features.dims()[0] == labels.len() && !labels.is_empty(),
            "probe needs [N, F] features with N labels"
        );
        let (n, f) = (features.dims()[0], features.dims()[1]);
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for row in features.data().chunks_exact(f) {
            row.iter()
                .zip(&mut mean)
                .for_each(|(v, m)| *m += v / n as f64);
        }
        for row in features.data().chunks_exact(f) {
            row.iter()
                .zip(&mean)
                .zip(&mut var)
                .for_each(|((v, m), s)| *s += (v - m).powi(2) / n as f64);
        }
        let inv_std = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-8)).collect();
        let mut probe = Self {
            weight: Tensor::zeros(vec![classes, f]),
            bias: Tensor::zeros(vec![classes]),
            mean,
            inv_std,
        };
        let x = probe.standardize(features);
        for _ in 0..cfg.iterations {
            let logits = linear(&x, &probe.weight, Some(&probe.bias))?;
            let (_, probs) = cross_entropy(&logits, labels)?;
            let g = Tensor::from_fn(vec![n, classes], |i| {
                let hot = if labels[i / classes] == i % classes {
                    1.0
                } else {
                    0.0
                };
                (probs.data()[i] - hot) / n as f64
            });
            let (_, gw, gb) = linear_grad(&g, &x, &probe.weight);
            for (w, g) in probe.weight.data_mut().iter_mut().zip(gw.data()) {
                *w -= cfg.lr * (g + cfg.l2 * *w);
            }
            for (b, g) in probe.bias.data_mut().iter_mut().zip(gb.data()) {
                *b -= cfg.lr * g;
            }
        }
        Ok(probe)
    }

    fn standardize(&self, features: &Tensor<f64>) -> Tensor<f64> {
        let f = self.mean.len();
        Tensor::from_fn(features.dims().to_vec(), |i| {
            (features.data()[i] - self.mean[i % f]) * self.inv_std[i % f]
        })
    }

    pub fn predict(&self, features: &Tensor<f64>) -> Result<Vec<usize>> {
        let logits = linear(&self.standardize(features), &self.weight, Some(&self.bias))?;
        let classes = self.bias.numel();
        Ok(logits
            .data()
            .chunks_exact(classes)
            .map(|row| {
                (0..classes)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .unwrap_or(0)
            })
            .collect())
    }

    pub fn accuracy(&self, features: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(features)?;
        Ok(accuracy(&pred, labels))
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeScores {
    pub pixel: f64,
    pub spectral: f64,
}

/// Fits both probes on `train` and scores them on `test`.
pub fn probe_scores(
    train: &ToyDataset,
    test: &ToyDataset,
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeScores> {
    let pixel = LinearProbe::fit(&pixel_features(train), &train.labels, classes, cfg)?
        .accuracy(&pixel_features(test), &test.labels)?;
    let spectral = LinearProbe::fit(&spectral_features(train)?, &train.labels, classes, cfg)?
        .accuracy(&spectral_features(test)?, &test.labels)?;
    Ok(ProbeScores { pixel, spectral })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{generate_dataset, ToyDatasetConfig};

    #[test]
    fn separable_problem_is_learned() {
        let x = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.2, 0.8]).unwrap();
        let labels = [0, 0, 1, 1];
        let probe = LinearProbe::fit(&x, &labels, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(probe.predict(&x).unwrap(), labels);
        assert!(LinearProbe::fit(&x, &labels[..3], 2, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn toy_classes_are_spectral_not_pixel_separable() {
        let train = generate_dataset(&ToyDatasetConfig {
            seed: 1,
            per_class: 30,
            ..Default::default()
        })
        .unwrap();
        let test = generate_dataset(&ToyDatasetConfig {
            seed: 2,
            per_class: 20,
            ..Default::default()
        })
        .unwrap();
        let cfg = ProbeConfig {
            iterations: 100,
            ..Default::default()
        };
        let scores = probe_scores(&train, &test, 10, &cfg).unwrap();
        assert!(scores.pixel < 0.6, "{scores:?}");
        assert!(scores.spectral > 0.9, "{scores:?}");
    }
}
