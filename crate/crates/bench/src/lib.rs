//! Criterion benchmarks for the signal pipeline and the encoder; see `benches/`.
