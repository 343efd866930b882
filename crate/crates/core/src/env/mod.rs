//! Deterministic continuous-control toys.
//!
//! Transitions are deterministic; randomness enters only through the seeded
//! initial-state sampler used by `reset`.

mod pendulum;
mod point_mass;

pub use pendulum::Pendulum;
pub use point_mass::PointMass2D;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
}

impl EnvSpec {
    pub fn action_center(&self) -> Vec<f64> {
        self.action_low.iter().zip(&self.action_high).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn action_scale(&self) -> Vec<f64> {
        self.action_low.iter().zip(&self.action_high).map(|(l, h)| 0.5 * (h - l)).collect()
    }

    /// Clamps each component into its bounds.
    pub fn clamp_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (l, h))| a.clamp(*l, *h))
            .collect()
    }

    pub(crate) fn check_action(&self, action: &[f64]) -> Result<Vec<f64>> {
        check_dim("action", self.action_dim, action.len())?;
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite { op: "env action" });
        }
        Ok(self.clamp_action(action))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    /// Ground-truth reward.
    pub reward: f64,
    /// The episode is over (terminal state or horizon reached).
    pub done: bool,
    /// The episode ended in a true terminal state, as opposed to running out of
    /// time. Value targets only stop bootstrapping on terminal states.
    pub terminal: bool,
}

pub trait Environment {
    fn spec(&self) -> &EnvSpec;
    /// Draws an initial state from the sampler reseeded with `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    /// Advances from the current state. Actions outside the bounds are clamped.
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
    fn state(&self) -> Vec<f64>;
}

/// Identifier of a built-in environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum EnvKind {
    #[cfg_attr(feature = "serde", serde(rename = "pointmass2d"))]
    PointMass2D,
    #[cfg_attr(feature = "serde", serde(rename = "pendulum"))]
    Pendulum,
}

impl EnvKind {
    pub fn id(self) -> &'static str {
        match self {
            EnvKind::PointMass2D => "pointmass2d",
            EnvKind::Pendulum => "pendulum",
        }
    }

    pub fn make(self) -> Env {
        match self {
            EnvKind::PointMass2D => Env::PointMass2D(PointMass2D::new()),
            EnvKind::Pendulum => Env::Pendulum(Pendulum::new()),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointmass2d" => Ok(EnvKind::PointMass2D),
            "pendulum" => Ok(EnvKind::Pendulum),
            other => Err(Error::InvalidParameter {
                name: "env",
                reason: String::from(other) + " is not one of pointmass2d, pendulum",
            }),
        }
    }
}

/// Any built-in environment.
#[derive(Debug, Clone)]
pub enum Env {
    PointMass2D(PointMass2D),
    Pendulum(Pendulum),
}

impl Env {
    pub fn kind(&self) -> EnvKind {
        match self {
            Env::PointMass2D(_) => EnvKind::PointMass2D,
            Env::Pendulum(_) => EnvKind::Pendulum,
        }
    }
}

impl Environment for Env {
    fn spec(&self) -> &EnvSpec {
        match self {
            Env::PointMass2D(e) => e.spec(),
            Env::Pendulum(e) => e.spec(),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        match self {
            Env::PointMass2D(e) => e.reset(seed),
            Env::Pendulum(e) => e.reset(seed),
        }
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        match self {
            Env::PointMass2D(e) => e.step(action),
            Env::Pendulum(e) => e.step(action),
        }
    }

    fn state(&self) -> Vec<f64> {
        match self {
            Env::PointMass2D(e) => e.state(),
            Env::Pendulum(e) => e.state(),
        }
    }
}
