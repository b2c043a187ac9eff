//! Criterion benchmarks for the cfpo workspace; see `benches/`.
