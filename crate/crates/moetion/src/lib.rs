//! Desk-scale mixture-of-experts LoRA fine-tuning with a body-part motion
//! tokenizer, wired to a small decoder-only language model and a synthetic
//! task suite.
//!
//! The crate is organized around a minimal reverse-mode autodiff engine
//! ([`tape`]), LoRA expert banks with a prompt-conditioned gating network
//! ([`moe`]), a part-based pose/motion tokenizer ([`tokenizer`]), a toy
//! foundation model with an extensible vocabulary ([`lm`]), synthetic dataset
//! generators ([`taskgen`]), and training/evaluation harnesses ([`train`],
//! [`eval`]). The `moetion` binary ties them together.

pub mod checkpoint;
pub mod error;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
