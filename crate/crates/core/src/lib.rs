pub mod attack;
pub mod defenses;
pub mod envs;
pub mod error;
pub mod experiments;
pub mod frlcore;
pub mod metrics;
pub mod numcore;

pub use error::{Error, Result};
