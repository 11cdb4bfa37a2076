//! Clustering-based active learning with teacher distillation and human
//! verification for generative tasks.
//!
//! The numerical core (k-means, scoring, selection, metrics) lives in
//! `distal-core`; this crate adds provider transports, persistence, the
//! orchestrated loop, the verification API and the simulation harness.

pub mod clock;
pub mod config;
pub mod distill;
pub mod embed;
pub mod error;
pub mod mock;
pub mod orchestrator;
pub mod providers;
pub mod replay;
pub mod scoring;
pub mod server;
pub mod sim;
pub mod store;
pub mod transport;
pub mod verify;

pub use error::{Error, Result};
