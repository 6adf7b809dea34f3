//! Experiment runner around `ppfactor-core`: config files in, density
//! factorization out, as machine-readable artifacts.
//!
//! The library side exists so integration tests can drive full experiments
//! without spawning the binary; `main.rs` is a thin argument layer over
//! [`runner::run_experiment`].

pub mod config;
pub mod ingest;
pub mod report;
pub mod runner;
