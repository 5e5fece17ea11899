//! Criterion benchmarks for the hot paths of the pipeline; see `benches/`.
