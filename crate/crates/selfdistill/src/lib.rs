//! Desk-scale laboratory for reliability-weighted on-policy self-distillation.
//!
//! A tiny decoder-only transformer is trained on its own sampled completions:
//! the student's next-token distribution is pulled toward a conditioned
//! teacher (a demonstration-conditioned snapshot or an EMA of the student),
//! with per-token supervision weighted by cross-context teacher agreement,
//! capped by divergence clipping, and optionally augmented by token-level
//! contrastive and feature-matching terms. The crate ships the synthetic task
//! corpus, the policy and its reverse-mode gradient engine, the loss algebra
//! with exact oracles, the training loop, evaluation metrics, and a
//! deterministic experiment runner.

pub mod agreement;
pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod objectives;
pub mod params;
pub mod policy;
pub mod runner;
pub mod scalar;
pub mod tokens;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
