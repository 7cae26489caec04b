//! Criterion benchmarks for the forward pass and retrieval metrics live under `benches/`.
