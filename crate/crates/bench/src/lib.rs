//! Criterion benchmarks for the segmentation pipeline live under `benches/`.
