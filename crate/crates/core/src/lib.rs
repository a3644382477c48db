//! Compact on-policy reinforcement learning and policy distillation for
//! continuous control.

pub mod autodiff;
pub mod distill;
pub mod distributed;
pub mod env;
pub mod error;
pub mod extensions;
pub mod nn;
pub mod ppo;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
