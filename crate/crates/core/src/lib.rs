//! Multi-reward group-relative policy optimization for flow-matching models,
//! at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`numeric`]: tensors, parameter stores, MLPs with exact gradients, AdamW,
//!   and the finite-difference oracle.
//! - [`flow`]: the flow-matching path, deterministic and noise-preserving
//!   stochastic samplers, the velocity model, and the flow-matching loss.
//! - [`scb`]: stacked channel bridging, a multi-layer conditioning connector
//!   over a toy layered encoder with think tokens and LoRA adapters.
//! - [`reward`]: pointwise and pairwise rewards and per-category weights.
//! - [`grpo`]: reward-wise advantage normalization, the clipped surrogate,
//!   velocity-space KL and the RL training step.
//! - [`data`]: weighted source sampling and stage gating.
//! - [`harness`]: toy tasks, run configs, checkpoints, metrics, and the
//!   `sft`/`rl`/`ablate`/`eval`/`selftest` entry points.

pub mod data;
pub mod error;
pub mod flow;
pub mod grpo;
pub mod harness;
pub mod numeric;
pub mod reward;
pub mod scb;

pub use error::{Error, Result};
