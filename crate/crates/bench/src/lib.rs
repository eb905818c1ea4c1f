//! Criterion benchmarks for `detkit`; see `benches/`.
