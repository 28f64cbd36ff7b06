//! Criterion benchmarks for the spectral pipeline; see `benches/`.
