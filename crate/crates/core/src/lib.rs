//! Profiling and anomaly analysis of WASI file I/O in standalone
//! WebAssembly runtimes.
//!
//! The crate probes a runtime's compiled WASI shims in user space and the
//! I/O syscalls they issue in the kernel, pairs entry/exit events into
//! interval metrics, and runs detectors for known WASI performance
//! anomalies over the results. Recorded event logs can be replayed through
//! the same pipeline, which is how the bundled golden fixtures are checked.

pub mod analysis;
pub mod cli;
pub mod collector;
pub mod fixtures;
pub mod harness;
pub mod model;
pub mod pipeline;
pub mod registry;
pub mod report;

pub use model::*;
