//! Criterion benchmarks for the key agreement and the detector; see `benches/`.
