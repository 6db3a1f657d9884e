//! Loopback simulator for choreographies: devices serving projected roles
//! over HTTP, fault injection, a trace collector, the run loop and
//! renderers for sequence diagrams and latency histograms.
pub mod device;
pub mod fault;
pub mod scenario;
pub mod trace;
pub mod invariants;
pub mod render;
pub mod runner;
