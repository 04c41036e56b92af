//! Criterion benchmarks for tiltwise live in benches/.
