//! Criterion benchmarks for the scan kernels and model passes live under `benches/`.
