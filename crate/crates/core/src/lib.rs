//! Cross-domain co-embeddings for implicit-feedback recommendation.
//!
//! Users are embedded from the auxiliary items they interacted with and
//! scored against target item embeddings. Training maximizes the per-user
//! correlation between predicted similarities and interaction counts, using
//! a sampled block of users and items per step.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
