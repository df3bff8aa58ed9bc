//! Criterion benchmarks for the simulation and fitting kernels; see `benches/`.
