//! Scalar twin soft Q-networks trained on the soft Bellman residual, used by
//! the SAC expert and the SAC-GAILfO baseline.

use alloc::vec;
use alloc::vec::Vec;

use crate::actor::{Policy, SoftQ};
use crate::critic::hcat;
use crate::error::{check_dim, Error, Result};
use crate::nn::{self, loss_gradients, Matrix, Mlp, MlpSpec, ParamVector, Tape, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct QNet {
    net: Mlp,
}

impl QNet {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<(Self, ParamVector)> {
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut params = ParamVector::new();
        let net = Mlp::append(&mut params, "", MlpSpec::new(sizes), rng)?;
        Ok((Self { net }, params))
    }

    pub fn from_params(params: &ParamVector) -> Result<Self> {
        let spec = nn::spec_from_layout(params, 0)?;
        check_dim("q output", 1, spec.output_dim())?;
        Ok(Self {
            net: Mlp::bind(params, 0, spec)?,
        })
    }

    /// `Q(s, a)` for each `[s | a]` row.
    pub fn values(&self, params: &ParamVector, sa: &Matrix) -> Vec<f64> {
        self.net.forward(params, sa).into_vec()
    }

    pub fn values_tape(&self, tape: &mut Tape, params: &ParamVector, trainable: bool, sa: Var) -> Var {
        let vars = tape.params(params, trainable);
        self.net.forward_tape(tape, &vars, sa)
    }

    /// Soft Bellman residual `J_Q = mean ½(Q(s, a) − y)²` and its gradient.
    pub fn loss_and_grad(&self, params: &ParamVector, sa: &Matrix, targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        if sa.rows() == 0 {
            return Err(Error::Empty { what: "q batch" });
        }
        check_dim("q targets", sa.rows(), targets.len())?;
        loss_gradients(params, |tape, vars| {
            let x = tape.constant(sa.clone());
            let q = self.net.forward_tape(tape, vars, x);
            let y = tape.constant(Matrix::column(targets.to_vec()));
            let d = tape.sub(q, y);
            let sq = tape.square(d);
            let m = tape.mean(sq);
            Ok(tape.scale(m, 0.5))
        })
    }
}

/// `y = r + γ(1 − done)(min_k Q̄_k(s′, a′) − α log π(a′|s′))` with `a′` drawn
/// from the policy with parameters `theta`.
#[allow(clippy::too_many_arguments)]
pub fn soft_targets(
    net: &QNet,
    targets: [&ParamVector; 2],
    policy: &Policy,
    theta: &ParamVector,
    next_states: &Matrix,
    done: &[bool],
    labels: &[f64],
    gamma: f64,
    alpha: f64,
    noise: &Matrix,
) -> Result<Vec<f64>> {
    let b = next_states.rows();
    check_dim("q labels", b, labels.len())?;
    check_dim("q done flags", b, done.len())?;
    let (a, lp) = policy.sample_with_noise(theta, next_states, noise);
    let sa = hcat(next_states, &a);
    let q1 = net.values(targets[0], &sa);
    let q2 = net.values(targets[1], &sa);
    let y: Vec<f64> = (0..b)
        .map(|i| {
            let bootstrap = if done[i] { 0.0 } else { gamma };
            labels[i] + bootstrap * (q1[i].min(q2[i]) - alpha * lp[i])
        })
        .collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "soft q targets" });
    }
    Ok(y)
}

/// `min(Q₁, Q₂)` as the policy objective.
#[derive(Debug, Clone, Copy)]
pub struct TwinQ<'a> {
    pub net: &'a QNet,
    pub critics: [&'a ParamVector; 2],
}

impl SoftQ for TwinQ<'_> {
    fn q_tape(&self, tape: &mut Tape, states: Var, actions: Var) -> Result<Var> {
        let sa = tape.concat_cols(states, actions);
        let q1 = self.net.values_tape(tape, self.critics[0], false, sa);
        let q2 = self.net.values_tape(tape, self.critics[1], false, sa);
        Ok(tape.min(q1, q2))
    }
}
