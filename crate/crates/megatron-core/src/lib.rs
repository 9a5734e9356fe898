//! Clean-label backdoor attack toolkit for small vision transformers.
//!
//! The pipeline: train an attacker-side surrogate transformer, optimize a
//! trigger pattern from its attention signals, split the trigger into masked
//! sub-triggers, craft clean-label poisoned samples under an L∞ budget via
//! feature matching, train a victim on the poisoned set, and measure attack
//! effectiveness and visual stealth.

pub mod artifact;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod poison;
pub mod rollout;
pub mod tape;
pub mod trigger;
pub mod vit;

pub use error::{Error, Result};
