//! Adversarial state-transition reward `r_φ(s, s′)`.
//!
//! The reward is trained to separate expert transitions from agent
//! transitions by minimizing
//! `L_r(φ) = E_agent[r_φ] − E_expert[r_φ] + (μ/2)‖φ‖²`.
//! Its output is unbounded; the L2 term is the only capacity control.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{pair_matrix, ObservationPair, Transition};
use crate::error::{check_dim, check_finite, invalid, Error, Result};
use crate::nn::{loss_gradients, Activation, Matrix, Mlp, MlpSpec, Optimizer, ParamVector};
use crate::rng::Rng;

/// Saturating hidden units keep the output linear in the last layer's
/// weights, so the L2 term bounds the reward for every μ > 0. With ReLU
/// hidden units the output is cubic in the weights and the penalty cannot
/// hold it once expert and agent transitions separate.
pub const HIDDEN_ACTIVATION: Activation = Activation::Tanh;

#[derive(Debug, Clone, PartialEq)]
pub struct RewardParams {
    pub params: ParamVector,
    /// Weight-decay coefficient μ.
    pub l2_coefficient: f64,
    net: Mlp,
    state_dim: usize,
}

impl RewardParams {
    /// MLP `concat(s, s′) → scalar` with the given hidden widths.
    pub fn new(state_dim: usize, hidden: &[usize], l2_coefficient: f64, rng: &mut Rng) -> Result<Self> {
        if !(l2_coefficient >= 0.0) {
            return Err(invalid("l2_coefficient", "must be non-negative"));
        }
        let mut sizes = vec![2 * state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut params = ParamVector::new();
        let net = Mlp::append(&mut params, "", MlpSpec::new(sizes).with_hidden(HIDDEN_ACTIVATION), rng)?;
        Ok(Self {
            params,
            l2_coefficient,
            net,
            state_dim,
        })
    }

    /// Rebuilds from stored parameters; the layout must describe a
    /// `2·state_dim → … → 1` network.
    pub fn from_params(params: ParamVector, l2_coefficient: f64) -> Result<Self> {
        let spec = crate::nn::spec_from_layout(&params, 0)?.with_hidden(HIDDEN_ACTIVATION);
        if spec.output_dim() != 1 || spec.input_dim() % 2 != 0 {
            return Err(invalid("reward layout", "must map 2·state_dim inputs to one output"));
        }
        let state_dim = spec.input_dim() / 2;
        let net = Mlp::bind(&params, 0, spec)?;
        Ok(Self {
            params,
            l2_coefficient,
            net,
            state_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn spec(&self) -> &MlpSpec {
        self.net.spec()
    }

    pub fn reward_value(&self, s: &[f64], s_next: &[f64]) -> Result<f64> {
        check_dim("reward state", self.state_dim, s.len())?;
        check_dim("reward next state", self.state_dim, s_next.len())?;
        check_finite("reward input", s)?;
        check_finite("reward input", s_next)?;
        let x = pair_matrix([(s, s_next)], self.state_dim);
        Ok(self.net.forward(&self.params, &x).data()[0])
    }

    /// Rewards for each row of a `[s | s′]` matrix.
    pub fn values(&self, pairs: &Matrix) -> Vec<f64> {
        self.net.forward(&self.params, pairs).into_vec()
    }

    fn pairs_to_matrix(&self, pairs: &[ObservationPair]) -> Result<Matrix> {
        for p in pairs {
            check_dim("reward state", self.state_dim, p.s.len())?;
            check_dim("reward next state", self.state_dim, p.s_next.len())?;
        }
        Ok(pair_matrix(pairs.iter().map(|p| (p.s.as_slice(), p.s_next.as_slice())), self.state_dim))
    }

    pub fn reward_loss(&self, expert: &[ObservationPair], agent: &[ObservationPair]) -> Result<f64> {
        let (e, a) = (self.pairs_to_matrix(expert)?, self.pairs_to_matrix(agent)?);
        self.reward_loss_matrix(&e, &a)
    }

    /// `mean r(agent) − mean r(expert) + (μ/2)‖φ‖²` on `[s | s′]` rows.
    pub fn reward_loss_matrix(&self, expert: &Matrix, agent: &Matrix) -> Result<f64> {
        nonempty(expert, agent)?;
        let er = self.values(expert);
        let ar = self.values(agent);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(mean(&ar) - mean(&er) + 0.5 * self.l2_coefficient * self.params.squared_norm())
    }

    /// Loss and its gradient with respect to φ.
    pub fn loss_and_grad(&self, expert: &Matrix, agent: &Matrix) -> Result<(f64, Vec<f64>)> {
        nonempty(expert, agent)?;
        let (loss, mut grad) = loss_gradients(&self.params, |tape, vars| {
            let xe = tape.constant(expert.clone());
            let xa = tape.constant(agent.clone());
            let re = self.net.forward_tape(tape, vars, xe);
            let ra = self.net.forward_tape(tape, vars, xa);
            let me = tape.mean(re);
            let ma = tape.mean(ra);
            Ok(tape.sub(ma, me))
        })?;
        let mu = self.l2_coefficient;
        for (g, p) in grad.iter_mut().zip(self.params.values()) {
            *g += mu * p;
        }
        Ok((loss + 0.5 * mu * self.params.squared_norm(), grad))
    }

    /// One optimizer step on `L_r`; returns the pre-step loss.
    pub fn reward_update(&mut self, expert: &Matrix, agent: &Matrix, opt: &mut Optimizer) -> Result<f64> {
        let (loss, grad) = self.loss_and_grad(expert, agent)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "reward loss" });
        }
        opt.step(self.params.values_mut(), &grad)?;
        Ok(loss)
    }

    pub fn reward_update_pairs(
        &mut self,
        expert: &[ObservationPair],
        agent: &[ObservationPair],
        opt: &mut Optimizer,
    ) -> Result<f64> {
        let (e, a) = (self.pairs_to_matrix(expert)?, self.pairs_to_matrix(agent)?);
        self.reward_update(&e, &a, opt)
    }

    /// `r_φ(s, s′)` for each transition; actions are never read.
    pub fn label_transitions(&self, batch: &[&Transition]) -> Result<Vec<f64>> {
        for t in batch {
            check_dim("reward state", self.state_dim, t.s.len())?;
            check_dim("reward next state", self.state_dim, t.s_next.len())?;
        }
        let x = pair_matrix(batch.iter().map(|t| (t.s.as_slice(), t.s_next.as_slice())), self.state_dim);
        Ok(self.values(&x))
    }
}

fn nonempty(expert: &Matrix, agent: &Matrix) -> Result<()> {
    if expert.rows() == 0 {
        return Err(Error::Empty { what: "expert batch" });
    }
    if agent.rows() == 0 {
        return Err(Error::Empty { what: "agent batch" });
    }
    Ok(())
}
