//! Flexible feed-drive axis simulator, input shapers, and a recurrent PPO
//! agent trained to position the axis without exciting its structural mode.

pub mod dynamics;
pub mod env;
pub mod error;
pub mod harness;
pub mod neural;
pub mod ppo;
pub mod shapers;

pub use error::{Error, Result};
