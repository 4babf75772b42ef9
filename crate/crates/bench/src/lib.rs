//! Benchmark-only crate; see `benches/pipeline.rs` for the timed paths.
