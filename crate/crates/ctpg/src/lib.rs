//! A multi-task reinforcement-learning laboratory built around cross-task
//! policy guidance: each task trains a guide that picks which task's control
//! policy should act next, with filtering and relabeling to keep borrowed
//! experience useful.

pub mod approx;
pub mod dp;
pub mod envs;
pub mod error;
pub mod guide;
pub mod harness;
pub mod replay;
pub mod sac;
pub mod trainer;

pub use error::{Error, Result};
