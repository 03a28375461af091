//! Few-shot fault diagnosis for rotating machinery.
//!
//! Vibration windows are augmented in time and frequency, encoded by two
//! multi-attention transformer branches (raw signal and magnitude
//! spectrum), pretrained by aligning the branches and discriminating
//! augmented instances, then fine-tuned on a small labeled budget with a
//! MAML-style bi-level loop.

pub mod augment;
pub mod datapipe;
pub mod error;
pub mod harness;
pub mod meta;
pub mod model;
pub mod objective;
pub mod rng;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ModelParams, Tensor};
