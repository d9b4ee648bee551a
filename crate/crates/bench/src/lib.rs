//! Benchmarks live in `benches/`; run them with `cargo bench -p msanet-bench`.

pub use msanet_core;
