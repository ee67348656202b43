//! Benchmark-only crate; see `benches/attn_scaling.rs`.
