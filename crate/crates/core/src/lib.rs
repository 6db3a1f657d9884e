//! Choreography runtime core: the WS-CDL subset model, document reader and
//! writer, per-role projection, the per-device transition engine, the REST
//! wire layer, distributed transactions and clone failover.

pub mod model;
pub mod parser;
pub mod projection;
pub mod transport;
pub mod transactions;
pub mod clones;
pub mod engine;

#[cfg(test)]
mod testgen;
