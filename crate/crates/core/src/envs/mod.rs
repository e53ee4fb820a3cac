//! Environments: the interface the agent and trainer drive, and the
//! grid-world scenarios.

mod grid;
mod layout;
mod palette;

pub use grid::{
    Dynamics, EnvState, Facing, GridWorld, GridWorldConfig, MeasurementKind, Monster, Pos, Projectile, Scenario,
    StepEvents, SubAction, STRUCTURAL_CHANNELS,
};
pub use layout::{Layout, SpawnKind};
pub use palette::{make_appearance_split, Palette, Surface, DEFAULT_PALETTE};

use crate::error::Result;

/// What the agent perceives after every reset or step.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Height × width × channels, channel-last.
    pub sensory: Vec<f32>,
    /// Raw (unnormalized) measurements.
    pub measurements: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvSpec {
    pub observation_shape: (usize, usize, usize),
    pub actions: usize,
    pub measurements: Vec<&'static str>,
}

pub trait Environment: Send {
    fn spec(&self) -> EnvSpec;

    /// Starts a new episode. All randomness of the episode derives from `seed`.
    fn reset(&mut self, seed: u64) -> Observation;

    /// Advances one agent step. Fails on an out-of-range action or when the
    /// episode has already ended.
    fn step(&mut self, action: usize) -> Result<Transition>;
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn spec(&self) -> EnvSpec {
        (**self).spec()
    }

    fn reset(&mut self, seed: u64) -> Observation {
        (**self).reset(seed)
    }

    fn step(&mut self, action: usize) -> Result<Transition> {
        (**self).step(action)
    }
}
