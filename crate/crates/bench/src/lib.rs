//! Benchmarks for the fusion rules, the variational update and a full IMM
//! step live under `benches/`; run them with `cargo bench -p immrm-bench`.
