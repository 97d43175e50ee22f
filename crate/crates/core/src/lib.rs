//! Deterministic simulator and protocol library for continuous neighbor
//! discovery in duty-cycled wireless sensor networks.
//!
//! Static nodes with a shared radio range discover each other by waking at
//! random offsets once per cycle, broadcasting a HELLO, and listening
//! briefly. Mutually discovered nodes organize into segments that share the
//! ongoing discovery workload: each member estimates its in-segment degree
//! and scales its HELLO rate so the segment as a whole sustains the
//! aggregate rate needed to detect a hidden neighbor within a target
//! deadline at a target probability. New discoveries trigger a coordination
//! flood and a short high-rate burst that surfaces the remaining hidden
//! links around the newcomer.
//!
//! The crate is split into the physical layer ([`topology`]), the protocol
//! rules ([`protocol`]), the discrete-event engine ([`simulator`]), and
//! result accounting ([`metrics`]). All randomness flows from explicit
//! seeds; a trial replayed with the same seed produces identical results.

pub mod metrics;
pub mod protocol;
pub mod simulator;
pub mod time;
pub mod topology;

pub use time::{SimDuration, SimTime, TICKS_PER_SEC};
pub use topology::{NodeId, Pair, Position, RadioGraph, TopologyError};
