//! Algorithmic core of `distal`, a clustering-based active-learning loop for
//! generative tasks in which training targets are distilled from a teacher
//! model and checked by a human before the learner is retrained.
//!
//! Everything here is `no_std` + `alloc`: the pieces are pure functions over
//! in-memory values, and all IO, clocks and provider traffic live in the
//! `distal` crate.
//!
//! - [`math`]: numerically stable softmax and Shannon entropy.
//! - [`kmeans`]: seeded k-means++ / Lloyd clustering.
//! - [`select`]: informativeness scores and the random, top-N and per-cluster
//!   acquisition strategies.
//! - [`metrics`]: subgroup error-ratio variance, MTLD, SafeScore, CS-Score.
//! - [`pool`]: instance lifecycle, labeled pairs and the audit log.
//! - [`template`]: teacher prompt templates.
//! - [`sim`]: synthetic skewed pools and the mock learner model.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod error;
pub mod kmeans;
pub mod math;
pub mod metrics;
pub mod pool;
pub mod select;
pub mod sim;
pub mod template;

pub use error::{Error, Result};
