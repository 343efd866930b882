use alloc::vec;
use alloc::vec::Vec;

use super::{EnvSpec, Environment, StepResult};
use crate::error::Result;
use crate::math::{self, PI};
use crate::rng::{stream, uniform, Stream};

pub const DT: f64 = 0.05;
pub const GRAVITY: f64 = 10.0;
pub const MASS: f64 = 1.0;
pub const LENGTH: f64 = 1.0;
pub const MAX_SPEED: f64 = 8.0;
pub const MAX_TORQUE: f64 = 2.0;

/// Torque-limited pendulum swing-up; `θ = 0` is upright.
///
/// Observation `[cos θ, sin θ, θ̇]`. Reward `−(θ² + 0.1θ̇² + 0.001a²)` on the
/// pre-step state with θ wrapped to `(−π, π]`.
#[derive(Debug, Clone)]
pub struct Pendulum {
    spec: EnvSpec,
    theta: f64,
    theta_dot: f64,
    t: usize,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut a = libm::fmod(theta + PI, two_pi);
    if a < 0.0 {
        a += two_pi;
    }
    let w = a - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

impl Pendulum {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                state_dim: 3,
                action_dim: 1,
                action_low: vec![-MAX_TORQUE],
                action_high: vec![MAX_TORQUE],
                horizon: 200,
            },
            theta: 0.0,
            theta_dot: 0.0,
            t: 0,
        }
    }

    pub fn set_angle(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot;
        self.t = 0;
    }

    pub fn angle(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, Stream::Env);
        let theta = uniform(&mut rng, -PI, PI);
        let theta_dot = uniform(&mut rng, -1.0, 1.0);
        self.set_angle(theta, theta_dot);
        self.state()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let u = self.spec.check_action(action)?[0];
        let th = wrap_angle(self.theta);
        let reward = -(th * th + 0.1 * self.theta_dot * self.theta_dot + 0.001 * u * u);
        let acc = 3.0 * GRAVITY / (2.0 * LENGTH) * math::sin(self.theta) + 3.0 / (MASS * LENGTH * LENGTH) * u;
        self.theta_dot = (self.theta_dot + acc * DT).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta += self.theta_dot * DT;
        self.t += 1;
        Ok(StepResult {
            next_state: self.state(),
            reward,
            done: self.t >= self.spec.horizon,
            terminal: false,
        })
    }

    fn state(&self) -> Vec<f64> {
        vec![math::cos(self.theta), math::sin(self.theta), self.theta_dot]
    }
}
