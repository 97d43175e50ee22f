//! Experiment front end: TOML configuration and batch CSV/trace reporting on
//! top of the `cnd-core` simulator.

pub mod batch;
pub mod config;
