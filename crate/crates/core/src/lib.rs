//! Three-stage sim-to-real transfer for goal-directed indoor navigation.

pub mod agent;
pub mod error;
pub mod evalkit;
pub mod fadapt;
pub mod harness;
pub mod pmimic;
pub mod rl;

pub use error::{Error, Result};
pub use indoorworld::mix_seed;
