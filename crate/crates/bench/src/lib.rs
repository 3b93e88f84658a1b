//! Criterion benchmarks for the guidance loop live in `benches/`.
