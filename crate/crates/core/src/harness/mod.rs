//! Synthetic data, linear probes, toy training and scan benchmarks.

pub mod bench;
pub mod dataset;
pub mod probe;
pub mod train;

pub use bench::{bench_csv, bench_scan, scaling_ratios, BenchConfig, BenchRow};
pub use dataset::{generate_dataset, read_dataset, write_dataset, ToyDataset, ToyDatasetConfig};
pub use probe::{
    pixel_features, probe_scores, spectral_features, LinearProbe, ProbeConfig, ProbeScores,
};
pub use train::{
    cosine_lr, evaluate, gradient_census, train_model, train_toy, AdamW, TrainConfig, TrainReport,
};
