//! Direct future prediction.
//!
//! An agent observes a sensory grid and a vector of measurements, predicts
//! how each measurement will change at several temporal offsets for every
//! available action, and acts by maximizing a goal-weighted sum of those
//! predictions. Training is plain supervised regression on experience
//! collected by the agent itself.

pub mod agent;
pub mod config;
pub mod envs;
pub mod error;
pub mod harness;
pub mod memory;
pub mod numerics;
pub mod parallel;
pub mod predictor;
pub mod trainer;

pub use error::{Error, Result};
pub use parallel::Execution;
pub use predictor::{choose_action, PredictionSet, PredictorConfig, PredictorNet, Preset};
