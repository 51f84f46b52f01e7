//! Reward-weighted fusion of several source policies into one target policy.
//!
//! The crate covers the whole loop at desk scale: scoring sampled responses
//! with a deterministic edit-distance reward, turning the scores into
//! per-source softmax weights, weighted fine-tuning, weighted preference
//! optimization (DPO, SimPO, leave-one-out REINFORCE), and the analysis
//! tools used to check the weighting's effect on gradients and variance.

pub mod analysis;
pub mod config;
pub mod dataset;
pub mod error;
pub mod hexfloat;
pub mod losses;
pub mod pipeline;
pub mod seed;
pub mod tinylm;
pub mod trainer;
pub mod types;
pub mod verify;
pub mod weighting;

pub use error::{Error, Result};
