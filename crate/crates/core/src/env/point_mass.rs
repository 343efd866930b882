use alloc::vec;
use alloc::vec::Vec;

use super::{EnvSpec, Environment, StepResult};
use crate::error::Result;
use crate::math;
use crate::rng::{stream, uniform, Stream};

pub const DT: f64 = 0.05;
pub const GOAL: [f64; 2] = [3.0, 3.0];
pub const POSITION_LIMIT: f64 = 5.0;
pub const VELOCITY_LIMIT: f64 = 2.0;
pub const ACTION_COST: f64 = 0.01;

/// A unit point mass in the plane driven by a bounded acceleration.
///
/// State `[x, y, vx, vy]`. Semi-implicit Euler: `v′ = v + a·dt`, `x′ = x + v′·dt`,
/// with velocities clipped to `±2` and positions to `±5`; hitting a wall zeroes
/// that velocity component. The reward is
/// `−‖x′ − goal‖ − 0.01‖a‖²`, evaluated at the post-step position.
#[derive(Debug, Clone)]
pub struct PointMass2D {
    spec: EnvSpec,
    state: [f64; 4],
    t: usize,
}

impl Default for PointMass2D {
    fn default() -> Self {
        Self::new()
    }
}

impl PointMass2D {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                state_dim: 4,
                action_dim: 2,
                action_low: vec![-1.0, -1.0],
                action_high: vec![1.0, 1.0],
                horizon: 200,
            },
            state: [0.0; 4],
            t: 0,
        }
    }

    /// Places the mass at an explicit state, resetting the step counter.
    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
        self.t = 0;
    }

    /// One deterministic transition from `state` under an in-bounds `action`.
    pub fn transition(state: &[f64; 4], action: &[f64]) -> ([f64; 4], f64) {
        let mut next = [0.0; 4];
        for k in 0..2 {
            let v = (state[2 + k] + action[k] * DT).clamp(-VELOCITY_LIMIT, VELOCITY_LIMIT);
            let x = state[k] + v * DT;
            next[k] = x.clamp(-POSITION_LIMIT, POSITION_LIMIT);
            // walls are inelastic
            next[2 + k] = if x == next[k] { v } else { 0.0 };
        }
        let dx = next[0] - GOAL[0];
        let dy = next[1] - GOAL[1];
        let cost = action.iter().map(|a| a * a).sum::<f64>();
        (next, -math::sqrt(dx * dx + dy * dy) - ACTION_COST * cost)
    }
}

impl Environment for PointMass2D {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, Stream::Env);
        let x = uniform(&mut rng, -1.0, 1.0);
        let y = uniform(&mut rng, -1.0, 1.0);
        self.set_state([x, y, 0.0, 0.0]);
        self.state.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let action = self.spec.check_action(action)?;
        let (next, reward) = Self::transition(&self.state, &action);
        self.state = next;
        self.t += 1;
        Ok(StepResult {
            next_state: next.to_vec(),
            reward,
            done: self.t >= self.spec.horizon,
            terminal: false,
        })
    }

    fn state(&self) -> Vec<f64> {
        self.state.to_vec()
    }
}
