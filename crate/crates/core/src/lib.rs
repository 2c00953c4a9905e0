//! Deterministic discrete-event simulator of an interleaved persistent-memory
//! hierarchy: CPU cache, integrated memory controllers with write-pending
//! queues, and DIMMs with an internal write-combining buffer.

pub mod cache;
pub mod config;
pub mod devices;
pub mod engine;
pub mod experiments;
pub mod error;
pub mod imc;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod topology;
pub mod workload;

pub use error::{Result, SimError};
