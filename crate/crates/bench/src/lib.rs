//! Criterion benchmarks for the hot paths of `icil-core`.
