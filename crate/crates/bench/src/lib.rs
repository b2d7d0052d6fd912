//! Criterion benchmarks for the cryptocubic crate; see `benches/`.
