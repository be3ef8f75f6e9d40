//! Unaligned image-to-image translation with learned per-sample importance weights.
//!
//! Two generators `G: X → Y`, `F: Y → X` are trained against least-squares
//! discriminators while importance networks `β_X`, `β_Y` learn to down-weight
//! samples that have no counterpart in the other domain.

pub mod config;
pub mod data;
pub mod diffnet;
pub mod error;
pub mod importance;
pub mod losses;
pub mod metrics;
pub mod synth;
pub mod trainer;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
