//! Context-folding policy-gradient training for a small autoregressive policy.

pub mod config;
pub mod env;
pub mod error;
pub mod losses;
pub mod persist;
pub mod policy;
pub mod report;
pub mod rewards;
pub mod rollout;
pub mod run;
pub mod rundir;
pub mod seed;
pub mod selection;
pub mod trainer;
pub mod trajectory;
pub mod vocab;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
