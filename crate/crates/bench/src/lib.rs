//! Criterion benchmarks for planforge-core; see `benches/`.
