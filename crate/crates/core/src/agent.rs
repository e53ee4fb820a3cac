//! Goals, exploration and action selection.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::predictor::{choose_action, PredictorNet};

/// Only the three longest horizons count by default.
pub const DEFAULT_OFFSET_COEFFS: [f32; 6] = [0.0, 0.0, 0.0, 0.5, 0.5, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct GoalSpec {
    /// One weight per predicted measurement.
    pub weights: Vec<f32>,
    /// One coefficient per temporal offset.
    pub offset_coeffs: Vec<f32>,
}

impl GoalSpec {
    pub fn new(weights: Vec<f32>, offset_coeffs: Vec<f32>) -> Self {
        GoalSpec { weights, offset_coeffs }
    }

    /// Weights with the default offset coefficients.
    pub fn with_default_offsets(weights: Vec<f32>) -> Self {
        GoalSpec::new(weights, DEFAULT_OFFSET_COEFFS.to_vec())
    }

    /// Offset-major outer product: component `i·n_m + j` is
    /// `offset_coeffs[i] · weights[j]`.
    pub fn flatten(&self) -> Vec<f32> {
        self.offset_coeffs
            .iter()
            .flat_map(|&c| self.weights.iter().map(move |&w| c * w))
            .collect()
    }
}

/// Flattens `spec` after checking it against the predictor's measurement
/// and offset counts.
pub fn build_goal_vector(spec: &GoalSpec, measurements: usize, offsets: usize) -> Result<Vec<f32>> {
    if spec.weights.len() != measurements {
        return Err(Error::invalid_argument(format!(
            "goal has {} measurement weights, expected {measurements}",
            spec.weights.len()
        )));
    }
    if spec.offset_coeffs.len() != offsets {
        return Err(Error::invalid_argument(format!(
            "goal has {} offset coefficients, expected {offsets}",
            spec.offset_coeffs.len()
        )));
    }
    Ok(spec.flatten())
}

/// Parses comma-separated weights such as `0.5,0.5,1`.
pub fn parse_weights(text: &str) -> Result<Vec<f32>> {
    let weights = crate::config::parse_list::<f32>(text)?;
    if weights.is_empty() || weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Config(format!("bad goal weights {text:?}")));
    }
    Ok(weights)
}

/// Linear decay from `start` to `end` over the first `horizon` fraction of
/// training, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            start: 1.0,
            end: 0.02,
            horizon: 0.6,
        }
    }
}

impl EpsilonSchedule {
    pub fn constant(epsilon: f64) -> Self {
        EpsilonSchedule {
            start: epsilon,
            end: epsilon,
            horizon: 0.0,
        }
    }

    pub fn value(&self, step: u64, total_steps: u64) -> f64 {
        let horizon = self.horizon * total_steps as f64;
        let t = step as f64;
        if t >= horizon {
            return self.end;
        }
        self.start + (self.end - self.start) * (t / horizon)
    }
}

pub fn epsilon_value(schedule: &EpsilonSchedule, step: u64, total_steps: u64) -> f64 {
    schedule.value(step, total_steps)
}

/// ε-greedy selection. With probability `epsilon` a uniformly random
/// action; otherwise the goal-maximizing action of the network's
/// predictions. `measurements` must already be normalized. No randomness is
/// drawn when `epsilon` is zero.
pub fn select_action<R: Rng + ?Sized>(
    net: &PredictorNet,
    sensory: &[f32],
    measurements: &[f32],
    goal: &[f32],
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid_argument(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..net.config().actions));
    }
    let predictions = net.forward(sensory, measurements, goal)?;
    choose_action(&predictions, goal)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GoalRegime {
    #[default]
    Fixed,
    /// Weights i.i.d. uniform on [0, 1].
    Uniform01,
    /// Weights i.i.d. uniform on [−1, 1].
    UniformSym,
}

impl fmt::Display for GoalRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GoalRegime::Fixed => "fixed",
            GoalRegime::Uniform01 => "uniform01",
            GoalRegime::UniformSym => "uniform_sym",
        })
    }
}

impl FromStr for GoalRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(GoalRegime::Fixed),
            "uniform01" => Ok(GoalRegime::Uniform01),
            "uniform_sym" => Ok(GoalRegime::UniformSym),
            other => Err(Error::Config(format!("unknown goal regime {other}"))),
        }
    }
}

/// A goal for a new episode. Only measurement weights are randomized; the
/// offset coefficients always come from `base`.
pub fn sample_goal<R: Rng + ?Sized>(regime: GoalRegime, base: &GoalSpec, rng: &mut R) -> GoalSpec {
    let draw = |rng: &mut R, lo: f32| -> Vec<f32> {
        base.weights.iter().map(|_| rng.random_range(lo..=1.0)).collect()
    };
    match regime {
        GoalRegime::Fixed => base.clone(),
        GoalRegime::Uniform01 => GoalSpec::new(draw(rng, 0.0), base.offset_coeffs.clone()),
        GoalRegime::UniformSym => GoalSpec::new(draw(rng, -1.0), base.offset_coeffs.clone()),
    }
}
