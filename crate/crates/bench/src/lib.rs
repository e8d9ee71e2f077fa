//! Criterion benchmarks for the nowcasting kernels; see `benches/`.
