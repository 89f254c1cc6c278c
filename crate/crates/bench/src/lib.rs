//! Criterion benchmarks for vccgm live under `benches/`.
