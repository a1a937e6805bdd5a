//! Video-to-image knowledge distillation for detection transformers.
//!
//! Trains a multi-frame teacher detector with spatiotemporal interaction,
//! then distills it into a single-frame student through target-guided
//! feature distillation and cross-view query distillation. Ships with a
//! deterministic synthetic "moving lesion" video benchmark, both F1- and
//! AP-style evaluation protocols, and an ablation runner.
//!
//! Everything runs on the CPU with bit-deterministic results for a fixed
//! seed and configuration.

pub mod autograd;
pub mod error;

pub use error::{Error, Result};
