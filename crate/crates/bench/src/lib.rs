//! Criterion benchmarks for the attention kernels and the selector; see `benches/`.
