//! Training loops for the distributional imitation learner, the SAC expert
//! and the SAC-GAILfO baseline, plus expert observation collection and
//! evaluation.
//!
//! Each iteration follows the same order: collect environment steps into the
//! replay buffer, update the reward, then run the policy-side updates
//! (critics, policy, temperature, target networks).

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::RngCore;

use crate::actor::{policy_loss, standard_noise, Policy, Temperature};
use crate::critic::{
    compute_target_quantiles, critic_loss_and_grad, generate_fractions, hcat, CriticArch, FractionBatch, FractionMode,
    FractionProposal, QuantileFractions, QuantileNet,
};
use crate::data::{pair_matrix, ExpertObservationSet, ObservationPair, ReplayBuffer, Transition};
use crate::env::{Env, EnvKind, EnvSpec, Environment};
use crate::error::{in_component, invalid, Error, Result};
use crate::math;
use crate::nn::{polyak_update, AdamConfig, Matrix, Optimizer, ParamVector};
use crate::qcritic::{soft_targets, QNet, TwinQ};
use crate::reward::RewardParams;
use crate::risk::{FractionSource, RiskKind, RiskMeasure, RiskSoftQ};
use crate::rng::{standard_normal, stream, uniform, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Algorithm {
    /// Distributional critics with a learned state-transition reward.
    #[cfg_attr(feature = "serde", serde(rename = "module"))]
    Module,
    /// Soft actor-critic on the ground-truth reward (expert training).
    #[cfg_attr(feature = "serde", serde(rename = "sac"))]
    Sac,
    /// Scalar soft actor-critic with the learned reward.
    #[cfg_attr(feature = "serde", serde(rename = "sac-gailfo"))]
    SacGailfo,
}

impl Algorithm {
    pub fn id(self) -> &'static str {
        match self {
            Algorithm::Module => "module",
            Algorithm::Sac => "sac",
            Algorithm::SacGailfo => "sac-gailfo",
        }
    }

    pub fn uses_expert(self) -> bool {
        self != Algorithm::Sac
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "module" => Ok(Algorithm::Module),
            "sac" => Ok(Algorithm::Sac),
            "sac-gailfo" => Ok(Algorithm::SacGailfo),
            _ => Err(invalid("algo", "must be one of module, sac, sac-gailfo")),
        }
    }
}

/// Every knob of a run. Keys double as the JSON configuration keys.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub env: EnvKind,
    pub algo: Algorithm,
    pub seed: u64,
    /// Environment steps for the whole run.
    pub total_steps: usize,
    pub steps_per_iteration: usize,
    pub reward_updates: usize,
    /// Agent transitions for reward updates come from this many most recent
    /// replay entries; zero uses the whole buffer.
    pub reward_window: usize,
    pub policy_updates: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub iota: f64,
    pub lr_reward: f64,
    pub lr_critic: f64,
    pub lr_policy: f64,
    pub lr_alpha: f64,
    pub lr_fraction: f64,
    pub initial_alpha: f64,
    pub num_quantiles: usize,
    pub kappa: f64,
    pub mu: f64,
    pub fractions: FractionMode,
    pub risk_measure: RiskKind,
    pub beta: f64,
    pub replay_capacity: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub warmup_steps: usize,
    /// Width of both hidden layers in every network.
    pub hidden: usize,
    pub cos_dim: usize,
    pub fqf_hidden: usize,
    /// Expert observation file (front end only).
    pub expert_data: Option<String>,
    /// Output directory (front end only).
    pub out: Option<String>,
    /// Pairs to collect (front end only).
    pub pairs: usize,
    /// Collection action noise (front end only).
    pub noise_std: f64,
    /// Policy checkpoint for collection and evaluation (front end only).
    pub checkpoint: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::PointMass2D,
            algo: Algorithm::Module,
            seed: 0,
            total_steps: 100_000,
            steps_per_iteration: 1,
            reward_updates: 1,
            reward_window: 10_000,
            policy_updates: 1,
            batch_size: 256,
            gamma: 0.99,
            iota: 0.005,
            lr_reward: 3e-4,
            lr_critic: 3e-4,
            lr_policy: 3e-4,
            lr_alpha: 3e-4,
            lr_fraction: 1e-5,
            initial_alpha: 1.0,
            num_quantiles: 32,
            kappa: 1.0,
            mu: 1e-4,
            fractions: FractionMode::Iqn,
            risk_measure: RiskKind::Neutral,
            beta: 0.0,
            replay_capacity: 100_000,
            eval_interval: 5_000,
            eval_episodes: 10,
            warmup_steps: 1_000,
            hidden: 256,
            cos_dim: 64,
            fqf_hidden: 128,
            expert_data: None,
            out: None,
            pairs: 5_000,
            noise_std: 0.01,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid("gamma", "must lie in (0,1)"));
        }
        if !(self.iota > 0.0 && self.iota <= 1.0) {
            return Err(invalid("iota", "must lie in (0,1]"));
        }
        let rates = [
            ("lr_reward", self.lr_reward),
            ("lr_critic", self.lr_critic),
            ("lr_policy", self.lr_policy),
            ("lr_alpha", self.lr_alpha),
            ("lr_fraction", self.lr_fraction),
            ("initial_alpha", self.initial_alpha),
            ("kappa", self.kappa),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, "must be positive"));
            }
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(invalid("mu", "must be non-negative"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(invalid("noise_std", "must be non-negative"));
        }
        let counts = [
            ("steps_per_iteration", self.steps_per_iteration),
            ("batch_size", self.batch_size),
            ("num_quantiles", self.num_quantiles),
            ("replay_capacity", self.replay_capacity),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("hidden", self.hidden),
            ("cos_dim", self.cos_dim),
            ("fqf_hidden", self.fqf_hidden),
            ("pairs", self.pairs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(invalid(name, "must be at least 1"));
            }
        }
        if self.batch_size > self.replay_capacity {
            return Err(invalid("batch_size", "must not exceed replay_capacity"));
        }
        self.risk().map(|_| ())
    }

    pub fn risk(&self) -> Result<RiskMeasure> {
        RiskMeasure::new(self.risk_measure, self.beta)
    }

    fn adam(&self, len: usize, lr: f64) -> Optimizer {
        Optimizer::adam(len, AdamConfig::with_lr(lr))
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub reward_loss: Option<f64>,
    pub critic1_loss: Option<f64>,
    pub critic2_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub alpha: f64,
    pub entropy_estimate: Option<f64>,
    pub buffer_size: usize,
}

/// How many updates of each kind have run, and which reward version the
/// latest policy-side update saw.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateCounters {
    pub iterations: usize,
    pub reward_updates: usize,
    pub critic_updates: usize,
    pub policy_updates: usize,
    /// Reward update count when the last policy update ran.
    pub policy_reward_version: usize,
    /// Reward update count at the end of the last iteration's reward phase.
    pub iteration_reward_version: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct LastLosses {
    reward: Option<f64>,
    critic1: Option<f64>,
    critic2: Option<f64>,
    policy: Option<f64>,
    entropy: Option<f64>,
}

#[derive(Debug, Clone)]
struct QuantileCritics {
    net: QuantileNet,
    w: [ParamVector; 2],
    w_bar: [ParamVector; 2],
    opts: [Optimizer; 2],
    proposal: Option<(FractionProposal, Optimizer)>,
}

#[derive(Debug, Clone)]
struct ScalarCritics {
    net: QNet,
    q: [ParamVector; 2],
    q_bar: [ParamVector; 2],
    opts: [Optimizer; 2],
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Critics {
    Quantile(QuantileCritics),
    Scalar(ScalarCritics),
}

/// Owns every piece of mutable training state for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    measure: RiskMeasure,
    env: Env,
    spec: EnvSpec,
    policy: Policy,
    theta: ParamVector,
    theta_bar: ParamVector,
    policy_opt: Optimizer,
    temperature: Temperature,
    critics: Critics,
    reward: Option<(RewardParams, Optimizer)>,
    expert: Option<ExpertObservationSet>,
    buffer: ReplayBuffer,
    rng_env: Rng,
    rng_action: Rng,
    rng_replay: Rng,
    rng_expert: Rng,
    rng_fractions: Rng,
    state: Vec<f64>,
    steps: usize,
    counters: UpdateCounters,
    last: LastLosses,
}

impl Trainer {
    pub fn new(config: TrainConfig, expert: Option<ExpertObservationSet>) -> Result<Self> {
        config.validate()?;
        let measure = config.risk()?;
        let mut env = config.env.make();
        let spec = env.spec().clone();
        if config.algo.uses_expert() {
            let set = expert
                .as_ref()
                .ok_or_else(|| invalid("expert_data", "is required for imitation runs"))?;
            set.validate()?;
            if set.env_id != config.env.id() {
                return Err(invalid("expert_data", "was collected on a different environment"));
            }
            if set.state_dim != spec.state_dim {
                return Err(Error::DimensionMismatch {
                    what: "expert state",
                    expected: spec.state_dim,
                    found: set.state_dim,
                });
            }
        }
        let h = config.hidden;
        let mut init = stream(config.seed, Stream::Init);
        let (policy, theta) = Policy::new(&spec, &[h, h], &mut init)?;
        let theta_bar = theta.clone();
        let policy_opt = config.adam(theta.len(), config.lr_policy);
        let temperature = Temperature::new(
            config.initial_alpha,
            spec.action_dim,
            config.adam(1, config.lr_alpha),
        )?;
        let critics = match config.algo {
            Algorithm::Module => {
                let net = QuantileNet::new(CriticArch {
                    state_dim: spec.state_dim,
                    action_dim: spec.action_dim,
                    hidden: h,
                    cos_dim: config.cos_dim,
                });
                let w = [net.init(&mut init)?, net.init(&mut init)?];
                let proposal = if config.fractions == FractionMode::Fqf {
                    let p = FractionProposal::new(h, config.fqf_hidden, config.num_quantiles, &mut init)?;
                    let opt = config.adam(p.params.len(), config.lr_fraction);
                    Some((p, opt))
                } else {
                    None
                };
                Critics::Quantile(QuantileCritics {
                    opts: [config.adam(w[0].len(), config.lr_critic), config.adam(w[1].len(), config.lr_critic)],
                    w_bar: w.clone(),
                    w,
                    net,
                    proposal,
                })
            }
            Algorithm::Sac | Algorithm::SacGailfo => {
                let (net, q1) = QNet::new(spec.state_dim, spec.action_dim, &[h, h], &mut init)?;
                let (_, q2) = QNet::new(spec.state_dim, spec.action_dim, &[h, h], &mut init)?;
                let q = [q1, q2];
                Critics::Scalar(ScalarCritics {
                    opts: [config.adam(q[0].len(), config.lr_critic), config.adam(q[1].len(), config.lr_critic)],
                    q_bar: q.clone(),
                    q,
                    net,
                })
            }
        };
        let reward = if config.algo.uses_expert() {
            let r = RewardParams::new(spec.state_dim, &[h, h], config.mu, &mut init)?;
            let opt = config.adam(r.params.len(), config.lr_reward);
            Some((r, opt))
        } else {
            None
        };
        let buffer = ReplayBuffer::new(config.replay_capacity, spec.state_dim, spec.action_dim);
        let mut rng_env = stream(config.seed, Stream::Env);
        let state = env.reset(rng_env.next_u64());
        Ok(Self {
            measure,
            policy,
            theta,
            theta_bar,
            policy_opt,
            temperature,
            critics,
            reward,
            expert: if config.algo.uses_expert() { expert } else { None },
            buffer,
            rng_env,
            rng_action: stream(config.seed, Stream::Action),
            rng_replay: stream(config.seed, Stream::Replay),
            rng_expert: stream(config.seed, Stream::Expert),
            rng_fractions: stream(config.seed, Stream::Fractions),
            state,
            steps: 0,
            counters: UpdateCounters::default(),
            last: LastLosses::default(),
            env,
            spec,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn env_spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    pub fn theta_bar(&self) -> &ParamVector {
        &self.theta_bar
    }

    pub fn alpha(&self) -> f64 {
        self.temperature.alpha()
    }

    pub fn reward(&self) -> Option<&RewardParams> {
        self.reward.as_ref().map(|(r, _)| r)
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn counters(&self) -> UpdateCounters {
        self.counters
    }

    /// Online critic parameters and their targets.
    pub fn critic_params(&self) -> ([&ParamVector; 2], [&ParamVector; 2]) {
        match &self.critics {
            Critics::Quantile(c) => ([&c.w[0], &c.w[1]], [&c.w_bar[0], &c.w_bar[1]]),
            Critics::Scalar(c) => ([&c.q[0], &c.q[1]], [&c.q_bar[0], &c.q_bar[1]]),
        }
    }

    /// Named parameter groups for checkpointing.
    pub fn checkpoint(&self) -> Vec<(String, ParamVector)> {
        let mut out = vec![
            ("actor".to_string(), self.theta.clone()),
            ("actor_target".to_string(), self.theta_bar.clone()),
            ("log_alpha".to_string(), scalar_params(self.temperature.log_alpha)),
        ];
        let (online, target) = self.critic_params();
        out.push(("critic1".to_string(), online[0].clone()));
        out.push(("critic2".to_string(), online[1].clone()));
        out.push(("critic1_target".to_string(), target[0].clone()));
        out.push(("critic2_target".to_string(), target[1].clone()));
        if let Critics::Quantile(QuantileCritics {
            proposal: Some((p, _)), ..
        }) = &self.critics
        {
            out.push(("fqf_proposal".to_string(), p.params.clone()));
        }
        if let Some((r, _)) = &self.reward {
            out.push(("reward".to_string(), r.params.clone()));
        }
        out
    }

    /// Runs until `total_steps`, calling `on_eval` at every evaluation point,
    /// and returns the final evaluation.
    pub fn run(&mut self, mut on_eval: impl FnMut(&Trainer, &MetricsRow) -> Result<()>) -> Result<(f64, f64)> {
        while self.steps < self.config.total_steps {
            self.iteration()?;
            let at_end = self.steps >= self.config.total_steps;
            if self.steps.is_multiple_of(self.config.eval_interval) || at_end {
                let row = self.metrics_row()?;
                on_eval(self, &row)?;
            }
        }
        self.evaluate()
    }

    /// Deterministic-policy evaluation with the run's evaluation seed.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        evaluate(
            &self.policy,
            &self.theta,
            self.config.env,
            self.config.eval_episodes,
            self.config.seed,
        )
    }

    pub fn metrics_row(&self) -> Result<MetricsRow> {
        let (mean, std) = self.evaluate()?;
        Ok(MetricsRow {
            step: self.steps,
            eval_return_mean: mean,
            eval_return_std: std,
            reward_loss: self.last.reward,
            critic1_loss: self.last.critic1,
            critic2_loss: self.last.critic2,
            policy_loss: self.last.policy,
            alpha: self.temperature.alpha(),
            entropy_estimate: self.last.entropy,
            buffer_size: self.buffer.len(),
        })
    }

    /// One pass of the training loop: collection, reward updates, then the
    /// policy-side updates.
    pub fn iteration(&mut self) -> Result<()> {
        for _ in 0..self.config.steps_per_iteration {
            if self.steps >= self.config.total_steps {
                break;
            }
            self.collect_step()?;
        }
        if self.steps >= self.config.warmup_steps && !self.buffer.is_empty() {
            if self.reward.is_some() {
                for _ in 0..self.config.reward_updates {
                    self.reward_step()?;
                }
            }
            self.counters.iteration_reward_version = self.counters.reward_updates;
            for _ in 0..self.config.policy_updates {
                self.policy_step()?;
            }
        }
        self.counters.iterations += 1;
        Ok(())
    }

    fn collect_step(&mut self) -> Result<()> {
        let action = if self.steps < self.config.warmup_steps {
            let spec = &self.spec;
            (0..spec.action_dim)
                .map(|j| uniform(&mut self.rng_action, spec.action_low[j], spec.action_high[j]))
                .collect()
        } else {
            self.policy
                .sample_action(&self.theta, &self.state, &mut self.rng_action)
                .map_err(in_component("policy sampling"))?
                .0
        };
        let res = self.env.step(&action)?;
        let keep_reward = self.config.algo == Algorithm::Sac;
        self.buffer.push(Transition {
            s: core::mem::take(&mut self.state),
            a: action,
            r_env: keep_reward.then_some(res.reward),
            s_next: res.next_state.clone(),
            done: res.terminal,
        })?;
        self.state = if res.done {
            self.env.reset(self.rng_env.next_u64())
        } else {
            res.next_state
        };
        self.steps += 1;
        Ok(())
    }

    fn reward_step(&mut self) -> Result<()> {
        let (Some((reward, opt)), Some(expert)) = (self.reward.as_mut(), self.expert.as_ref()) else {
            return Ok(());
        };
        let n = self.config.batch_size;
        let d = self.spec.state_dim;
        let e = expert.sample_batch(&mut self.rng_expert, n)?;
        let expert_m = pair_matrix(e.iter().map(|p| (p.s.as_slice(), p.s_next.as_slice())), d);
        let a = self.buffer.sample_recent(&mut self.rng_replay, n, self.config.reward_window)?;
        let agent_m = pair_matrix(a.iter().map(|t| (t.s.as_slice(), t.s_next.as_slice())), d);
        let loss = reward
            .reward_update(&expert_m, &agent_m, opt)
            .map_err(in_component("reward"))?;
        self.last.reward = Some(loss);
        self.counters.reward_updates += 1;
        Ok(())
    }

    fn policy_step(&mut self) -> Result<()> {
        let b = self.config.batch_size;
        let da = self.spec.action_dim;
        let batch = self.buffer.sample_batch(&mut self.rng_replay, b)?;
        let labels = match &self.reward {
            Some((r, _)) => r.label_transitions(&batch).map_err(in_component("reward labels"))?,
            None => batch
                .iter()
                .map(|t| t.r_env.ok_or(invalid("replay", "is missing ground-truth rewards")))
                .collect::<Result<Vec<f64>>>()?,
        };
        let states = Matrix::from_rows(&batch.iter().map(|t| t.s.as_slice()).collect::<Vec<_>>());
        let actions = Matrix::from_rows(&batch.iter().map(|t| t.a.as_slice()).collect::<Vec<_>>());
        let next_states = Matrix::from_rows(&batch.iter().map(|t| t.s_next.as_slice()).collect::<Vec<_>>());
        let done: Vec<bool> = batch.iter().map(|t| t.done).collect();
        drop(batch);
        let sa = hcat(&states, &actions);
        let alpha = self.temperature.alpha();
        let next_noise = standard_noise(&mut self.rng_action, b, da);
        let policy_noise = standard_noise(&mut self.rng_action, b, da);
        let cfg = &self.config;

        let out = match &mut self.critics {
            Critics::Quantile(c) => {
                let m = cfg.num_quantiles;
                let (current, target) = match cfg.fractions {
                    FractionMode::Qrdqn => {
                        let f = FractionBatch::shared(&QuantileFractions::uniform(m));
                        (f.clone(), f)
                    }
                    FractionMode::Iqn => (
                        FractionBatch::shared(&generate_fractions(FractionMode::Iqn, m, &mut self.rng_fractions)?),
                        FractionBatch::shared(&generate_fractions(FractionMode::Iqn, m, &mut self.rng_fractions)?),
                    ),
                    FractionMode::Fqf => {
                        let (p, popt) = c.proposal.as_mut().expect("fqf proposal exists");
                        let emb = c.net.embedding(&c.w[0], &sa);
                        let f = p.fractions(&emb).map_err(in_component("fraction proposal"))?;
                        if m >= 2 {
                            let interior = interior_fractions(&f);
                            let z_tau = c.net.quantiles_from_embedding(&c.w[0], &emb, &interior);
                            let z_hat = c.net.quantiles_from_embedding(&c.w[0], &emb, f.tau_hat());
                            p.update(&emb, &z_tau, &z_hat, popt)
                                .map_err(in_component("fraction proposal"))?;
                        }
                        (f.clone(), f)
                    }
                };
                let y = compute_target_quantiles(
                    &c.net,
                    [&c.w_bar[0], &c.w_bar[1]],
                    &self.policy,
                    &self.theta_bar,
                    &next_states,
                    &done,
                    &labels,
                    &target,
                    cfg.gamma,
                    alpha,
                    &next_noise,
                )
                .map_err(in_component("critic targets"))?;
                let mut losses = [0.0; 2];
                for (k, slot) in losses.iter_mut().enumerate() {
                    let (loss, grad) = critic_loss_and_grad(&c.net, &c.w[k], &sa, &y, &current, &target, cfg.kappa)
                        .map_err(in_component(if k == 0 { "critic1" } else { "critic2" }))?;
                    c.opts[k].step(c.w[k].values_mut(), &grad)?;
                    *slot = loss;
                }
                let source = match &c.proposal {
                    Some((p, _)) => FractionSource::Proposal(p),
                    None => FractionSource::Fixed(&current),
                };
                let q = RiskSoftQ {
                    net: &c.net,
                    critics: [&c.w[0], &c.w[1]],
                    fractions: source,
                    measure: self.measure,
                };
                let out = policy_loss(&self.policy, &self.theta, &q, alpha, &states, &policy_noise)
                    .map_err(in_component("policy"))?;
                for k in 0..2 {
                    polyak_update(&c.w[k], &mut c.w_bar[k], cfg.iota)?;
                }
                self.last.critic1 = Some(losses[0]);
                self.last.critic2 = Some(losses[1]);
                out
            }
            Critics::Scalar(c) => {
                let y = soft_targets(
                    &c.net,
                    [&c.q_bar[0], &c.q_bar[1]],
                    &self.policy,
                    &self.theta,
                    &next_states,
                    &done,
                    &labels,
                    cfg.gamma,
                    alpha,
                    &next_noise,
                )
                .map_err(in_component("critic targets"))?;
                let mut losses = [0.0; 2];
                for (k, slot) in losses.iter_mut().enumerate() {
                    let (loss, grad) = c
                        .net
                        .loss_and_grad(&c.q[k], &sa, &y)
                        .map_err(in_component(if k == 0 { "critic1" } else { "critic2" }))?;
                    c.opts[k].step(c.q[k].values_mut(), &grad)?;
                    *slot = loss;
                }
                let q = TwinQ {
                    net: &c.net,
                    critics: [&c.q[0], &c.q[1]],
                };
                let out = policy_loss(&self.policy, &self.theta, &q, alpha, &states, &policy_noise)
                    .map_err(in_component("policy"))?;
                for k in 0..2 {
                    polyak_update(&c.q[k], &mut c.q_bar[k], cfg.iota)?;
                }
                self.last.critic1 = Some(losses[0]);
                self.last.critic2 = Some(losses[1]);
                out
            }
        };
        self.counters.critic_updates += 1;
        self.counters.policy_reward_version = self.counters.reward_updates;
        debug_assert_eq!(self.counters.policy_reward_version, self.counters.iteration_reward_version);
        self.policy_opt.step(self.theta.values_mut(), &out.grad)?;
        self.temperature
            .update(&out.log_probs)
            .map_err(in_component("temperature"))?;
        polyak_update(&self.theta, &mut self.theta_bar, cfg.iota)?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged {
                component: "policy",
                op: "loss",
            });
        }
        self.last.policy = Some(out.loss);
        self.last.entropy = Some(out.entropy_estimate());
        self.counters.policy_updates += 1;
        Ok(())
    }
}

fn scalar_params(v: f64) -> ParamVector {
    let mut p = ParamVector::new();
    p.push_segment("value", vec![1], vec![v]);
    p
}

/// Interior fractions `τ_1..τ_{M−1}` per row.
fn interior_fractions(f: &FractionBatch) -> Matrix {
    let tau = f.tau();
    let m = f.num_quantiles();
    let mut out = Matrix::zeros(tau.rows(), m - 1);
    for r in 0..tau.rows() {
        out.row_mut(r).copy_from_slice(&tau.row(r)[1..m]);
    }
    out
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, math::sqrt(var))
}

/// Initial-state seeds shared by every evaluation with the same `seed`.
fn episode_seeds(seed: u64, purpose: Stream, episodes: usize) -> Vec<u64> {
    let mut rng = stream(seed, purpose);
    (0..episodes).map(|_| rng.next_u64()).collect()
}

/// Ground-truth returns of `act` over full episodes.
fn rollout_returns(
    kind: EnvKind,
    episodes: usize,
    seed: u64,
    mut act: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if episodes == 0 {
        return Err(invalid("episodes", "must be at least 1"));
    }
    let mut env = kind.make();
    let mut returns = Vec::with_capacity(episodes);
    for s in episode_seeds(seed, Stream::Eval, episodes) {
        let mut state = env.reset(s);
        let mut total = 0.0;
        loop {
            let a = act(&state)?;
            let r = env.step(&a)?;
            total += r.reward;
            if r.done {
                break;
            }
            state = r.next_state;
        }
        returns.push(total);
    }
    Ok(returns)
}

/// Mean and standard deviation of deterministic-policy returns.
pub fn evaluate(policy: &Policy, theta: &ParamVector, kind: EnvKind, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let returns = rollout_returns(kind, episodes, seed, |s| policy.deterministic_action(theta, s))?;
    Ok(mean_std(&returns))
}

/// Returns of uniformly random actions, the normalization floor.
pub fn evaluate_random(kind: EnvKind, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let spec = kind.make().spec().clone();
    let mut rng = stream(seed, Stream::Action);
    let returns = rollout_returns(kind, episodes, seed, |_| {
        Ok((0..spec.action_dim)
            .map(|j| uniform(&mut rng, spec.action_low[j], spec.action_high[j]))
            .collect())
    })?;
    Ok(mean_std(&returns))
}

/// `(R − R_rand) / (R_E − R_rand)`.
pub fn normalized_score(ret: f64, random: f64, expert: f64) -> f64 {
    (ret - random) / (expert - random)
}

/// Rolls the expert with Gaussian action noise and keeps `n_pairs`
/// consecutive `(s, s′)` pairs; episode boundaries break the chain.
pub fn collect_observations(
    policy: &Policy,
    theta: &ParamVector,
    kind: EnvKind,
    n_pairs: usize,
    noise_std: f64,
    seed: u64,
) -> Result<ExpertObservationSet> {
    if n_pairs == 0 {
        return Err(invalid("pairs", "must be at least 1"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(invalid("noise_std", "must be non-negative"));
    }
    let mut env = kind.make();
    let spec = env.spec().clone();
    if policy.state_dim() != spec.state_dim || policy.action_dim() != spec.action_dim {
        return Err(Error::DimensionMismatch {
            what: "expert policy",
            expected: spec.state_dim,
            found: policy.state_dim(),
        });
    }
    let mut rng = stream(seed, Stream::Collect);
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut complete = Vec::new();
    let mut partial = 0.0;
    while pairs.len() < n_pairs {
        let mut state = env.reset(rng.next_u64());
        partial = 0.0;
        loop {
            let mut a = policy.deterministic_action(theta, &state)?;
            for v in &mut a {
                *v += noise_std * standard_normal(&mut rng);
            }
            let a = spec.clamp_action(&a);
            let r = env.step(&a)?;
            partial += r.reward;
            pairs.push(ObservationPair::new(state, r.next_state.clone()));
            if r.done {
                complete.push(partial);
                break;
            }
            if pairs.len() == n_pairs {
                break;
            }
            state = r.next_state;
        }
    }
    let mean_return = if complete.is_empty() { partial } else { mean_std(&complete).0 };
    Ok(ExpertObservationSet {
        env_id: kind.id().to_string(),
        state_dim: spec.state_dim,
        collection_seed: seed,
        noise_std,
        mean_return,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(algo: Algorithm) -> TrainConfig {
        TrainConfig {
            algo,
            total_steps: 300,
            warmup_steps: 100,
            batch_size: 16,
            hidden: 8,
            cos_dim: 4,
            num_quantiles: 4,
            eval_interval: 100,
            eval_episodes: 1,
            fqf_hidden: 8,
            ..TrainConfig::default()
        }
    }

    fn expert_set(n: usize) -> ExpertObservationSet {
        let spec = EnvKind::PointMass2D.make().spec().clone();
        let (p, theta) = Policy::new(&spec, &[8], &mut stream(0, Stream::Init)).unwrap();
        collect_observations(&p, &theta, EnvKind::PointMass2D, n, 0.01, 0).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            gamma: 1.5,
            ..TrainConfig::default()
        };
        assert_eq!(bad.validate().unwrap_err().to_string(), "gamma must lie in (0,1)");
        let bad = TrainConfig {
            batch_size: 10,
            replay_capacity: 5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn collection_bookkeeping() {
        let set = expert_set(400);
        assert_eq!(set.pairs.len(), 400);
        // Two full episodes: the chain breaks exactly once at the boundary.
        let breaks = set.pairs.windows(2).filter(|w| w[0].s_next != w[1].s).count();
        assert_eq!(breaks, 1);
        assert!(set.pairs[199].s_next != set.pairs[200].s);
    }

    #[test]
    fn noiseless_collection_replays() {
        let spec = EnvKind::PointMass2D.make().spec().clone();
        let (p, theta) = Policy::new(&spec, &[8], &mut stream(0, Stream::Init)).unwrap();
        let a = collect_observations(&p, &theta, EnvKind::PointMass2D, 50, 0.0, 3).unwrap();
        let b = collect_observations(&p, &theta, EnvKind::PointMass2D, 50, 0.0, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluation_shapes() {
        let spec = EnvKind::PointMass2D.make().spec().clone();
        let (p, theta) = Policy::new(&spec, &[8], &mut stream(0, Stream::Init)).unwrap();
        let (_, std) = evaluate(&p, &theta, EnvKind::PointMass2D, 1, 0).unwrap();
        assert_eq!(std, 0.0);
        assert_eq!(
            evaluate(&p, &theta, EnvKind::PointMass2D, 3, 1).unwrap(),
            evaluate(&p, &theta, EnvKind::PointMass2D, 3, 1).unwrap()
        );
        assert!(evaluate(&p, &theta, EnvKind::PointMass2D, 0, 1).is_err());
    }

    #[test]
    fn every_algorithm_runs() {
        for (algo, mode) in [
            (Algorithm::Sac, FractionMode::Iqn),
            (Algorithm::SacGailfo, FractionMode::Iqn),
            (Algorithm::Module, FractionMode::Iqn),
            (Algorithm::Module, FractionMode::Qrdqn),
            (Algorithm::Module, FractionMode::Fqf),
        ] {
            let cfg = TrainConfig {
                fractions: mode,
                ..tiny(algo)
            };
            let mut t = Trainer::new(cfg, Some(expert_set(200))).unwrap();
            let mut rows = Vec::new();
            t.run(|_, r| {
                rows.push(r.clone());
                Ok(())
            })
            .unwrap();
            assert_eq!(rows.len(), 3);
            assert_eq!(t.buffer().len(), 300);
            let c = t.counters();
            assert_eq!(c.policy_updates, 201);
            assert_eq!(c.reward_updates, if algo == Algorithm::Sac { 0 } else { 201 });
            assert!(rows[2].critic1_loss.unwrap().is_finite());
        }
    }

    #[test]
    fn imitation_needs_matching_expert() {
        assert!(Trainer::new(tiny(Algorithm::Module), None).is_err());
        let mut set = expert_set(10);
        set.env_id = "pendulum".into();
        assert!(Trainer::new(tiny(Algorithm::Module), Some(set)).is_err());
    }

    #[test]
    fn warmup_makes_no_updates() {
        let mut t = Trainer::new(tiny(Algorithm::Module), Some(expert_set(50))).unwrap();
        let theta0 = t.theta().clone();
        for _ in 0..99 {
            t.iteration().unwrap();
        }
        assert_eq!(t.counters().policy_updates, 0);
        assert_eq!(t.theta(), &theta0);
        for tr in t.buffer().iter() {
            assert!(tr.a.iter().all(|a| (-1.0..=1.0).contains(a)));
            assert!(tr.r_env.is_none());
        }
    }
}
