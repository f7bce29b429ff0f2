//! Library surface of the `prism` benchmark harness: experiment configs,
//! runners, sweeps, and trace export. The binary in `main.rs` is a thin
//! wrapper over these.

pub mod config;
pub mod experiment;
pub mod sweep;
pub mod traces;
