//! Tanh-squashed Gaussian policy, its soft policy loss and the entropy
//! temperature.

use alloc::vec;
use alloc::vec::Vec;

use crate::env::EnvSpec;
use crate::error::{check_dim, invalid, Error, Result};
use crate::math::{self, PI};
use crate::nn::{self, loss_gradients, Matrix, Mlp, MlpSpec, Optimizer, ParamVars, ParamVector, Tape, Var};
use crate::rng::{standard_normal, Rng};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Keeps the log-Jacobian of the squashing finite at saturation.
pub const SQUASH_EPS: f64 = 1e-6;
/// Squashed values are clipped to `±TANH_LIMIT` so that actions stay strictly
/// inside their bounds even when `tanh` rounds to one.
pub const TANH_LIMIT: f64 = 1.0 - 1e-9;

/// Gaussian policy over pre-squash actions; the network maps a state to
/// `[mean | log_std]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    net: Mlp,
    state_dim: usize,
    action_dim: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl Policy {
    /// Builds the policy and fresh parameters with the given hidden widths.
    pub fn new(env: &EnvSpec, hidden: &[usize], rng: &mut Rng) -> Result<(Self, ParamVector)> {
        let mut sizes = vec![env.state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * env.action_dim);
        let mut params = ParamVector::new();
        let net = Mlp::append(&mut params, "", MlpSpec::new(sizes), rng)?;
        Ok((Self::with_net(env, net), params))
    }

    /// Binds to stored parameters.
    pub fn from_params(env: &EnvSpec, params: &ParamVector) -> Result<Self> {
        let spec = nn::spec_from_layout(params, 0)?;
        check_dim("policy input", env.state_dim, spec.input_dim())?;
        check_dim("policy output", 2 * env.action_dim, spec.output_dim())?;
        let net = Mlp::bind(params, 0, spec)?;
        Ok(Self::with_net(env, net))
    }

    fn with_net(env: &EnvSpec, net: Mlp) -> Self {
        Self {
            net,
            state_dim: env.state_dim,
            action_dim: env.action_dim,
            center: env.action_center(),
            scale: env.action_scale(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Mean and clamped log standard deviation, each `B × action_dim`.
    pub fn head(&self, params: &ParamVector, states: &Matrix) -> (Matrix, Matrix) {
        let out = self.net.forward(params, states);
        let d = self.action_dim;
        let mut mean = Matrix::zeros(out.rows(), d);
        let mut log_std = Matrix::zeros(out.rows(), d);
        for i in 0..out.rows() {
            let r = out.row(i);
            mean.row_mut(i).copy_from_slice(&r[..d]);
            for (o, v) in log_std.row_mut(i).iter_mut().zip(&r[d..]) {
                *o = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
            }
        }
        (mean, log_std)
    }

    /// Reparameterized samples `a = c + s·tanh(μ + σ·ε)` and their
    /// log-densities for the given standard-normal `noise` (`B × action_dim`).
    pub fn sample_with_noise(&self, params: &ParamVector, states: &Matrix, noise: &Matrix) -> (Matrix, Vec<f64>) {
        let (mean, log_std) = self.head(params, states);
        let d = self.action_dim;
        let mut actions = Matrix::zeros(states.rows(), d);
        let mut log_probs = Vec::with_capacity(states.rows());
        for i in 0..states.rows() {
            let mut lp = 0.0;
            for j in 0..d {
                let eps = noise.get(i, j);
                let ls = log_std.get(i, j);
                let u = mean.get(i, j) + math::exp(ls) * eps;
                let t = math::tanh(u).clamp(-TANH_LIMIT, TANH_LIMIT);
                actions.set(i, j, self.center[j] + self.scale[j] * t);
                lp += -0.5 * eps * eps - ls - 0.5 * math::ln(2.0 * PI);
                lp -= math::ln(self.scale[j] * (1.0 - t * t) + SQUASH_EPS);
            }
            log_probs.push(lp);
        }
        (actions, log_probs)
    }

    /// One reparameterized draw `(a, log π(a|s))`.
    pub fn sample_action(&self, params: &ParamVector, s: &[f64], rng: &mut Rng) -> Result<(Vec<f64>, f64)> {
        check_dim("policy state", self.state_dim, s.len())?;
        let noise = standard_noise(rng, 1, self.action_dim);
        let (a, lp) = self.sample_with_noise(params, &Matrix::row_vector(s.to_vec()), &noise);
        if !a.is_finite() || !lp[0].is_finite() {
            return Err(Error::NonFinite { op: "policy sample" });
        }
        Ok((a.into_vec(), lp[0]))
    }

    /// `c + s·tanh(μ(s))`.
    pub fn deterministic_action(&self, params: &ParamVector, s: &[f64]) -> Result<Vec<f64>> {
        check_dim("policy state", self.state_dim, s.len())?;
        let (mean, _) = self.head(params, &Matrix::row_vector(s.to_vec()));
        let a: Vec<f64> = mean
            .row(0)
            .iter()
            .enumerate()
            .map(|(j, m)| self.center[j] + self.scale[j] * math::tanh(*m).clamp(-TANH_LIMIT, TANH_LIMIT))
            .collect();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "policy mean" });
        }
        Ok(a)
    }

    /// Tape version of [`Policy::sample_with_noise`]; returns the actions
    /// (`B × action_dim`) and log-densities (`B × 1`).
    pub fn sample_tape(&self, tape: &mut Tape, vars: &ParamVars, states: Var, noise: &Matrix) -> (Var, Var) {
        let d = self.action_dim;
        let b = noise.rows();
        let out = self.net.forward_tape(tape, vars, states);
        let mean = tape.slice_cols(out, 0, d);
        let raw = tape.slice_cols(out, d, d);
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        let std = tape.exp(log_std);
        let eps = tape.constant(noise.clone());
        let spread = tape.mul(std, eps);
        let u = tape.add(mean, spread);
        let t = tape.tanh(u);
        let t = tape.clamp(t, -TANH_LIMIT, TANH_LIMIT);

        let mut diag = Matrix::zeros(d, d);
        let mut neg_diag = Matrix::zeros(d, d);
        for j in 0..d {
            diag.set(j, j, self.scale[j]);
            neg_diag.set(j, j, -self.scale[j]);
        }
        let diag = tape.constant(diag);
        let center = tape.constant(Matrix::row_vector(self.center.clone()));
        let actions = tape.affine(t, diag, Some(center));

        let base: Vec<f64> = (0..b)
            .map(|i| noise.row(i).iter().map(|e| -0.5 * e * e).sum::<f64>() - 0.5 * d as f64 * math::ln(2.0 * PI))
            .collect();
        let base = tape.constant(Matrix::column(base));
        let ls_sum = tape.sum_rows(log_std);
        let gauss = tape.sub(base, ls_sum);

        let t2 = tape.square(t);
        let neg_diag = tape.constant(neg_diag);
        let offset = tape.constant(Matrix::row_vector(self.scale.iter().map(|s| s + SQUASH_EPS).collect()));
        let jac = tape.affine(t2, neg_diag, Some(offset));
        let log_jac = tape.log(jac);
        let corr = tape.sum_rows(log_jac);
        let log_prob = tape.sub(gauss, corr);
        (actions, log_prob)
    }
}

/// `rows × cols` standard-normal draws.
pub fn standard_noise(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| standard_normal(rng)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// A soft action value usable as the policy's objective. Critic parameters
/// are recorded as constants so only the action carries gradient.
pub trait SoftQ {
    /// `B × 1` values for `states` (constant) and `actions` on the tape.
    fn q_tape(&self, tape: &mut Tape, states: Var, actions: Var) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl PolicyLoss {
    /// `−mean log π`, the batch entropy estimate.
    pub fn entropy_estimate(&self) -> f64 {
        -self.log_probs.iter().sum::<f64>() / self.log_probs.len() as f64
    }
}

/// `J_π(θ) = mean_s [α log π_θ(ã|s) − Q(s, ã)]` with reparameterized
/// `ã` built from `noise`, and its gradient in `θ`.
pub fn policy_loss<Q: SoftQ + ?Sized>(
    policy: &Policy,
    theta: &ParamVector,
    q: &Q,
    alpha: f64,
    states: &Matrix,
    noise: &Matrix,
) -> Result<PolicyLoss> {
    if states.rows() == 0 {
        return Err(Error::Empty { what: "policy batch" });
    }
    check_dim("policy noise rows", states.rows(), noise.rows())?;
    let mut log_probs = Vec::new();
    let (loss, grad) = loss_gradients(theta, |tape, vars| {
        let s = tape.constant(states.clone());
        let (a, lp) = policy.sample_tape(tape, vars, s, noise);
        let qv = q.q_tape(tape, s, a)?;
        let weighted = tape.scale(lp, alpha);
        let per = tape.sub(weighted, qv);
        log_probs = tape.value(lp).data().to_vec();
        Ok(tape.mean(per))
    })?;
    Ok(PolicyLoss { loss, grad, log_probs })
}

/// Entropy temperature, optimized in log space against the target entropy
/// `H₀ = −action_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Temperature {
    pub log_alpha: f64,
    pub target_entropy: f64,
    opt: Optimizer,
}

impl Temperature {
    pub fn new(initial_alpha: f64, action_dim: usize, opt: Optimizer) -> Result<Self> {
        if !(initial_alpha > 0.0) || !initial_alpha.is_finite() {
            return Err(invalid("alpha", "must be positive"));
        }
        Ok(Self {
            log_alpha: math::ln(initial_alpha),
            target_entropy: -(action_dim as f64),
            opt,
        })
    }

    pub fn alpha(&self) -> f64 {
        math::exp(self.log_alpha)
    }

    /// `J(α) = mean(−α log π − α H₀)` and `dJ/dα = Ĥ − H₀`.
    pub fn loss_and_grad(&self, log_probs: &[f64]) -> Result<(f64, f64)> {
        temperature_loss_and_grad(self.log_alpha, self.target_entropy, log_probs)
    }

    /// One optimizer step on `log α` with gradient `dJ/dα · α`; returns the
    /// loss before the step.
    pub fn update(&mut self, log_probs: &[f64]) -> Result<f64> {
        let (loss, d_alpha) = self.loss_and_grad(log_probs)?;
        let mut p = [self.log_alpha];
        self.opt.step(&mut p, &[d_alpha * self.alpha()])?;
        self.log_alpha = p[0];
        Ok(loss)
    }
}

pub fn temperature_loss_and_grad(log_alpha: f64, target_entropy: f64, log_probs: &[f64]) -> Result<(f64, f64)> {
    if log_probs.is_empty() {
        return Err(Error::Empty { what: "temperature batch" });
    }
    let alpha = math::exp(log_alpha);
    let entropy = -log_probs.iter().sum::<f64>() / log_probs.len() as f64;
    let d_alpha = entropy - target_entropy;
    let loss = alpha * d_alpha;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "temperature loss" });
    }
    Ok((loss, d_alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvKind, Environment};
    use crate::nn::AdamConfig;
    use crate::rng::{stream, Stream};

    fn pendulum_policy(seed: u64) -> (Policy, ParamVector) {
        let spec = EnvKind::Pendulum.make().spec().clone();
        Policy::new(&spec, &[16, 16], &mut stream(seed, Stream::Init)).unwrap()
    }

    /// Sets the network to output a constant `[mean | log_std]`.
    fn constant_head(params: &mut ParamVector, mean: f64, log_std: f64) {
        params.fill(0.0);
        let last = params.segments().len() - 1;
        params.segment_mut(last).copy_from_slice(&[mean, log_std]);
    }

    #[test]
    fn entropy_matches_quadrature() {
        let (policy, mut p) = pendulum_policy(0);
        let (mu, ls) = (0.3, -0.5);
        constant_head(&mut p, mu, ls);
        let sigma = math::exp(ls);
        let scale = 2.0;
        // H(a) = H(u) + E[log(s(1 − tanh²u))], by trapezoid over u.
        let h_u = 0.5 * math::ln(2.0 * PI * core::f64::consts::E * sigma * sigma);
        let (lo, hi, n) = (mu - 12.0 * sigma, mu + 12.0 * sigma, 20_000);
        let step = (hi - lo) / n as f64;
        let mut e = 0.0;
        for k in 0..=n {
            let u = lo + k as f64 * step;
            let z = (u - mu) / sigma;
            let pdf = math::exp(-0.5 * z * z) / (sigma * math::sqrt(2.0 * PI));
            let t = math::tanh(u);
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            e += w * pdf * math::ln(scale * (1.0 - t * t));
        }
        let exact = h_u + e * step;

        let mut rng = stream(5, Stream::Action);
        let n_mc = 200_000;
        let states = Matrix::zeros(n_mc, 3);
        let noise = standard_noise(&mut rng, n_mc, 1);
        let (_, lp) = policy.sample_with_noise(&p, &states, &noise);
        let mc = -lp.iter().sum::<f64>() / n_mc as f64;
        assert!((mc - exact).abs() <= 0.01 * exact.abs(), "mc {mc} exact {exact}");
    }

    #[test]
    fn tape_matches_plain_sampling() {
        let (policy, p) = pendulum_policy(2);
        let mut rng = stream(2, Stream::Action);
        let states = standard_noise(&mut rng, 5, 3);
        let noise = standard_noise(&mut rng, 5, 1);
        let (a, lp) = policy.sample_with_noise(&p, &states, &noise);
        let mut tape = Tape::new();
        let vars = tape.params(&p, true);
        let s = tape.constant(states.clone());
        let (av, lpv) = policy.sample_tape(&mut tape, &vars, s, &noise);
        for (x, y) in tape.value(av).data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in tape.value(lpv).data().iter().zip(&lp) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn actions_stay_in_bounds() {
        let (policy, mut p) = pendulum_policy(1);
        constant_head(&mut p, 50.0, 2.0);
        let mut rng = stream(1, Stream::Action);
        for _ in 0..100 {
            let (a, lp) = policy.sample_action(&p, &[0.1, 0.2, 0.3], &mut rng).unwrap();
            assert!(a[0] > -2.0 && a[0] < 2.0);
            assert!(lp.is_finite());
        }
        let a = policy.deterministic_action(&p, &[0.0, 0.0, 0.0]).unwrap();
        assert!(a[0] < 2.0 && (a[0] - 2.0).abs() < 1e-8);
    }

    struct Quadratic;

    impl SoftQ for Quadratic {
        fn q_tape(&self, tape: &mut Tape, _states: Var, actions: Var) -> Result<Var> {
            let shifted = tape.add_scalar(actions, -0.5);
            let sq = tape.square(shifted);
            let s = tape.sum_rows(sq);
            Ok(tape.scale(s, -1.0))
        }
    }

    #[test]
    fn policy_gradient_matches_finite_differences() {
        let (policy, p) = pendulum_policy(4);
        let mut rng = stream(4, Stream::Action);
        let states = standard_noise(&mut rng, 6, 3);
        let noise = standard_noise(&mut rng, 6, 1);
        let out = policy_loss(&policy, &p, &Quadratic, 0.2, &states, &noise).unwrap();
        let h = 1e-5;
        for idx in (0..p.len()).step_by(7) {
            let mut plus = p.clone();
            plus.values_mut()[idx] += h;
            let mut minus = p.clone();
            minus.values_mut()[idx] -= h;
            let lp = policy_loss(&policy, &plus, &Quadratic, 0.2, &states, &noise).unwrap().loss;
            let lm = policy_loss(&policy, &minus, &Quadratic, 0.2, &states, &noise).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let an = out.grad[idx];
            assert!((fd - an).abs() / an.abs().max(fd.abs()).max(1e-8) < 1e-5, "{idx}: {fd} vs {an}");
        }
    }

    #[test]
    fn temperature_gradient() {
        // Entropy above target: α should shrink.
        let lp = [-3.0, -1.0];
        let (loss, g) = temperature_loss_and_grad(0.0, -1.0, &lp).unwrap();
        assert!((loss - 3.0).abs() < 1e-15);
        assert!((g - 3.0).abs() < 1e-15);
        let mut t = Temperature::new(1.0, 1, Optimizer::adam(1, AdamConfig::default())).unwrap();
        t.update(&lp).unwrap();
        assert!(t.alpha() < 1.0);
        assert!(Temperature::new(0.0, 1, Optimizer::Sgd { learning_rate: 0.1 }).is_err());
    }
}
