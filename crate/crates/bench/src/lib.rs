//! Criterion benchmarks for the spectral kernels live under `benches/`.
