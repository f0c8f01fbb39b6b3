//! Phasor-domain power network simulation with complex-frequency metrics.

pub mod cfmetrics;
pub mod devices;
pub mod dynsim;
pub mod error;
pub mod harness;
pub mod netmodel;
pub mod powerflow;

pub use error::Error;
