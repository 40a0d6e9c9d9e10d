//! Knowledge-prefix transfer learning for sequence-to-sequence code tasks.
//!
//! A prefix of key/value vectors is injected into every attention module of
//! a small encoder-decoder transformer. The prefix is trained continually
//! across several source tasks, each on a freshly loaded backbone, and then
//! carried over to a fresh backbone for a target task.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
