//! Benchmark harness for modality-agnostic forgery detection.
//!
//! A deterministic synthetic multimodal world ([`synthworld`]) feeds a shared
//! bottleneck MLP detector ([`detector`]) trained by multi-modal-learning or
//! domain-generalization objectives ([`algorithms`]). Runs are evaluated on a
//! held-out modality under three model-selection protocols ([`protocols`]),
//! and the learned feature space is inspected by [`analysis`].

pub mod algorithms;
pub mod analysis;
pub mod audit;
pub mod detector;
pub mod error;
pub mod numerics;
pub mod protocols;
pub mod rng;
pub mod selfcheck;
pub mod synthworld;

pub use error::{Error, Result};
