//! Benchmarks for the adaptation engine; see `benches/`.
