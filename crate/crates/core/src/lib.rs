//! Contrastive-curiosity-driven reinforcement learning at desk scale.

pub mod augment;
pub mod curiosity;
pub mod env;
pub mod learners;
pub mod error;
pub mod harness;
pub mod nn;
pub mod replay;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
