//! Twin quantile value networks `Z_{τ,w}(s, a)`, quantile fractions, the
//! distributional soft target and the pairwise quantile Huber loss.
//!
//! Every critic shares one architecture: a two-layer ReLU embedding of
//! `concat(s, a)` is multiplied elementwise with a ReLU embedding of the cosine
//! features `cos(π·k·τ̂)`, `k = 0..cos_dim`, and a ReLU layer maps the product
//! to a scalar quantile value.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::actor::Policy;
use crate::error::{check_dim, invalid, Error, Result};
use crate::math::{self, PI};
use crate::nn::{self, loss_gradients, Activation, Matrix, Mlp, MlpSpec, Optimizer, ParamVars, ParamVector, Tape, Var};
use crate::rng::Rng;

pub use crate::nn::polyak_update;

/// Sorted fractions `0 = τ_0 < … < τ_M = 1` and their midpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileFractions {
    pub tau: Vec<f64>,
    pub tau_hat: Vec<f64>,
}

impl QuantileFractions {
    pub fn from_tau(tau: Vec<f64>) -> Result<Self> {
        if tau.len() < 2 {
            return Err(invalid("quantile fractions", "need at least two endpoints"));
        }
        if tau[0] != 0.0 || tau[tau.len() - 1] != 1.0 {
            return Err(invalid("quantile fractions", "must start at 0 and end at 1"));
        }
        if tau.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("quantile fractions", "must be strictly increasing"));
        }
        let tau_hat = tau.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Ok(Self { tau, tau_hat })
    }

    /// Evenly spaced `τ_i = i/M`.
    pub fn uniform(m: usize) -> Self {
        assert!(m >= 1, "need at least one quantile");
        let tau = (0..=m).map(|i| i as f64 / m as f64).collect();
        Self::from_tau(tau).expect("uniform grid is valid")
    }

    pub fn num_quantiles(&self) -> usize {
        self.tau_hat.len()
    }

    /// Interval masses `τ_{i+1} − τ_i`.
    pub fn weights(&self) -> Vec<f64> {
        self.tau.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// How quantile fractions are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum FractionMode {
    /// Fixed grid `i/M`.
    Qrdqn,
    /// `M − 1` sorted uniform draws per update.
    Iqn,
    /// Learned per state-action by a proposal network.
    Fqf,
}

impl core::str::FromStr for FractionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qrdqn" => Ok(FractionMode::Qrdqn),
            "iqn" => Ok(FractionMode::Iqn),
            "fqf" => Ok(FractionMode::Fqf),
            _ => Err(invalid("fractions", "must be one of qrdqn, iqn, fqf")),
        }
    }
}

/// Fraction generation for the sampling-based modes. FQF fractions come from
/// [`FractionProposal::fractions`].
pub fn generate_fractions(mode: FractionMode, m: usize, rng: &mut Rng) -> Result<QuantileFractions> {
    if m == 0 {
        return Err(invalid("num_quantiles", "must be at least 1"));
    }
    match mode {
        FractionMode::Qrdqn => Ok(QuantileFractions::uniform(m)),
        FractionMode::Iqn => loop {
            let mut inner: Vec<f64> = (0..m - 1)
                .map(|_| loop {
                    let u: f64 = rng.random();
                    if u > 0.0 {
                        break u;
                    }
                })
                .collect();
            inner.sort_by(f64::total_cmp);
            let mut tau = Vec::with_capacity(m + 1);
            tau.push(0.0);
            tau.extend(inner);
            tau.push(1.0);
            if let Ok(f) = QuantileFractions::from_tau(tau) {
                break Ok(f);
            }
        },
        FractionMode::Fqf => Err(invalid("fractions", "fqf must be produced by the proposal network")),
    }
}

/// Fractions for a batch: one shared set, or one set per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionBatch {
    /// `1 × (M+1)` or `B × (M+1)`.
    tau: Matrix,
    /// `1 × M` or `B × M`.
    tau_hat: Matrix,
}

impl FractionBatch {
    pub fn shared(f: &QuantileFractions) -> Self {
        Self {
            tau: Matrix::row_vector(f.tau.clone()),
            tau_hat: Matrix::row_vector(f.tau_hat.clone()),
        }
    }

    pub fn per_sample(sets: &[QuantileFractions]) -> Self {
        let tau = Matrix::from_rows(&sets.iter().map(|f| f.tau.as_slice()).collect::<Vec<_>>());
        let tau_hat = Matrix::from_rows(&sets.iter().map(|f| f.tau_hat.as_slice()).collect::<Vec<_>>());
        Self { tau, tau_hat }
    }

    pub fn is_shared(&self) -> bool {
        self.tau.rows() == 1
    }

    pub fn num_quantiles(&self) -> usize {
        self.tau_hat.cols()
    }

    pub fn tau(&self) -> &Matrix {
        &self.tau
    }

    pub fn tau_hat(&self) -> &Matrix {
        &self.tau_hat
    }

    /// Fractions used for sample `b`.
    pub fn row(&self, b: usize) -> QuantileFractions {
        let r = if self.is_shared() { 0 } else { b };
        QuantileFractions {
            tau: self.tau.row(r).to_vec(),
            tau_hat: self.tau_hat.row(r).to_vec(),
        }
    }

    /// Interval masses, same row layout as the fractions.
    pub fn weights(&self) -> Matrix {
        let mut w = Matrix::zeros(self.tau.rows(), self.num_quantiles());
        for r in 0..self.tau.rows() {
            for (o, pair) in w.row_mut(r).iter_mut().zip(self.tau.row(r).windows(2)) {
                *o = pair[1] - pair[0];
            }
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CriticArch {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub cos_dim: usize,
}

/// Architecture of a quantile value network; parameters are held separately
/// so that `w₁, w₂, w̄₁, w̄₂` share one description.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileNet {
    arch: CriticArch,
    embed: Mlp,
    cos: Mlp,
    head: Mlp,
}

impl QuantileNet {
    pub fn new(arch: CriticArch) -> Self {
        let (sa, h) = (arch.state_dim + arch.action_dim, arch.hidden);
        let embed = Mlp::at(0, MlpSpec::new(vec![sa, h, h]).with_output(Activation::Relu));
        let cos = Mlp::at(4, MlpSpec::new(vec![arch.cos_dim, h]).with_output(Activation::Relu));
        let head = Mlp::at(6, MlpSpec::new(vec![h, h, 1]));
        Self { arch, embed, cos, head }
    }

    pub fn init(&self, rng: &mut Rng) -> Result<ParamVector> {
        let mut p = ParamVector::new();
        Mlp::append(&mut p, "embed.", self.embed.spec().clone(), rng)?;
        Mlp::append(&mut p, "cos.", self.cos.spec().clone(), rng)?;
        Mlp::append(&mut p, "head.", self.head.spec().clone(), rng)?;
        Ok(p)
    }

    /// Recovers the architecture from stored parameters.
    pub fn from_params(params: &ParamVector, state_dim: usize) -> Result<Self> {
        let segs = params.segments();
        if segs.len() != 10 {
            return Err(invalid("critic layout", "must have 10 segments"));
        }
        let sa = segs[0].shape[0];
        if sa <= state_dim {
            return Err(invalid("critic layout", "has an input narrower than the state"));
        }
        let arch = CriticArch {
            state_dim,
            action_dim: sa - state_dim,
            hidden: segs[0].shape[1],
            cos_dim: segs[4].shape[0],
        };
        let net = Self::new(arch);
        net.check(params)?;
        Ok(net)
    }

    pub fn arch(&self) -> CriticArch {
        self.arch
    }

    /// Validates that `params` matches this architecture.
    pub fn check(&self, params: &ParamVector) -> Result<()> {
        Mlp::bind(params, 0, self.embed.spec().clone())?;
        Mlp::bind(params, 4, self.cos.spec().clone())?;
        Mlp::bind(params, 6, self.head.spec().clone())?;
        check_dim("critic segments", 10, params.segments().len())
    }

    /// `cos(π·k·τ)` features for every entry of `points`, row-major.
    pub fn cos_features(&self, points: &Matrix) -> Matrix {
        let n = self.arch.cos_dim;
        let mut out = Matrix::zeros(points.len(), n);
        for (r, &tau) in points.data().iter().enumerate() {
            for (k, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = math::cos(PI * k as f64 * tau);
            }
        }
        out
    }

    /// State-action embedding, `B × hidden`.
    pub fn embedding(&self, params: &ParamVector, sa: &Matrix) -> Matrix {
        self.embed.forward(params, sa)
    }

    /// Quantile values at `points` (`1 × K` shared or `B × K`) from a
    /// precomputed embedding; returns `B × K`.
    pub fn quantiles_from_embedding(&self, params: &ParamVector, emb: &Matrix, points: &Matrix) -> Matrix {
        let (b, k) = (emb.rows(), points.cols());
        let psi = self.cos.forward(params, &self.cos_features(points));
        let shared = points.rows() == 1;
        let mut prod = Matrix::zeros(b * k, self.arch.hidden);
        for bi in 0..b {
            for i in 0..k {
                let r = if shared { i } else { bi * k + i };
                for ((o, e), p) in prod.row_mut(bi * k + i).iter_mut().zip(emb.row(bi)).zip(psi.row(r)) {
                    *o = e * p;
                }
            }
        }
        self.head.forward(params, &prod).reshaped(b, k)
    }

    /// Quantile values for `concat(s, a)` rows at `points`.
    pub fn quantiles(&self, params: &ParamVector, sa: &Matrix, points: &Matrix) -> Matrix {
        let emb = self.embedding(params, sa);
        self.quantiles_from_embedding(params, &emb, points)
    }

    pub fn embedding_tape(&self, tape: &mut Tape, vars: &ParamVars, sa: Var) -> Var {
        self.embed.forward_tape(tape, vars, sa)
    }

    pub fn quantiles_from_embedding_tape(&self, tape: &mut Tape, vars: &ParamVars, emb: Var, points: &Matrix) -> Var {
        let b = tape.value(emb).rows();
        let k = points.cols();
        let feats = tape.constant(self.cos_features(points));
        let psi = self.cos.forward_tape(tape, vars, feats);
        let prod = tape.row_outer_mul(emb, psi, k);
        let out = self.head.forward_tape(tape, vars, prod);
        tape.reshape(out, b, k)
    }

    pub fn quantiles_tape(&self, tape: &mut Tape, vars: &ParamVars, sa: Var, points: &Matrix) -> Var {
        let emb = self.embedding_tape(tape, vars, sa);
        self.quantiles_from_embedding_tape(tape, vars, emb, points)
    }

    /// `Z_{τ̂,w}(s, a)` for a single input.
    pub fn quantile_value(&self, params: &ParamVector, s: &[f64], a: &[f64], tau_hat: f64) -> Result<f64> {
        check_dim("critic state", self.arch.state_dim, s.len())?;
        check_dim("critic action", self.arch.action_dim, a.len())?;
        if !(tau_hat > 0.0 && tau_hat < 1.0) {
            return Err(invalid("tau_hat", "must lie in (0, 1)"));
        }
        let sa = concat_rows(&[s], &[a]);
        Ok(self.quantiles(params, &sa, &Matrix::scalar(tau_hat)).data()[0])
    }
}

/// Row-stacks `[s | a]`.
pub fn concat_rows(states: &[&[f64]], actions: &[&[f64]]) -> Matrix {
    let rows: Vec<Vec<f64>> = states
        .iter()
        .zip(actions)
        .map(|(s, a)| {
            let mut r = s.to_vec();
            r.extend_from_slice(a);
            r
        })
        .collect();
    Matrix::from_rows(&rows)
}

/// Column-wise concatenation of two matrices with equal row counts.
pub fn hcat(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows(), b.rows());
    let cols = a.cols() + b.cols();
    let mut data = Vec::with_capacity(a.rows() * cols);
    for i in 0..a.rows() {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Matrix::from_vec(a.rows(), cols, data)
}

/// Huber function `L_κ(δ)`.
pub fn huber(delta: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(invalid("kappa", "must be positive"));
    }
    Ok(nn::huber_value(delta, kappa))
}

/// Quantile Huber weight `ρ_τ^κ(δ) = |τ − 1{δ < 0}|·L_κ(δ)/κ`.
pub fn quantile_huber_rho(tau: f64, delta: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(invalid("kappa", "must be positive"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(invalid("tau", "must lie in (0, 1)"));
    }
    Ok(nn::quantile_huber_rho(tau, delta, kappa))
}

/// Target quantiles
/// `y_i = r + γ(1 − done)·(min_k Z_{τ̂_i, w̄_k}(s′, a′) − α log π_θ̄(a′|s′))`
/// with `a′` drawn once per sample from the target policy using `noise`.
///
/// Returns `B × N` where `N` is the number of target fractions.
#[allow(clippy::too_many_arguments)]
pub fn compute_target_quantiles(
    net: &QuantileNet,
    target_critics: [&ParamVector; 2],
    policy: &Policy,
    theta_bar: &ParamVector,
    next_states: &Matrix,
    done: &[bool],
    labels: &[f64],
    target_fractions: &FractionBatch,
    gamma: f64,
    alpha: f64,
    noise: &Matrix,
) -> Result<Matrix> {
    let b = next_states.rows();
    check_dim("target labels", b, labels.len())?;
    check_dim("target done flags", b, done.len())?;
    let n = target_fractions.num_quantiles();
    if gamma == 0.0 {
        let mut out = Matrix::zeros(b, n);
        for (i, &r) in labels.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v = r);
        }
        return Ok(out);
    }
    let (next_actions, log_probs) = policy.sample_with_noise(theta_bar, next_states, noise);
    if log_probs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "target log-probability" });
    }
    let sa = hcat(next_states, &next_actions);
    let points = target_fractions.tau_hat();
    let z1 = net.quantiles(target_critics[0], &sa, points);
    let z2 = net.quantiles(target_critics[1], &sa, points);
    let mut out = Matrix::zeros(b, n);
    for i in 0..b {
        let bootstrap = if done[i] { 0.0 } else { gamma };
        let (r1, r2) = (z1.row(i), z2.row(i));
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            let zmin = if r1[j] <= r2[j] { r1[j] } else { r2[j] };
            *o = labels[i] + bootstrap * (zmin - alpha * log_probs[i]);
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "target quantiles" });
    }
    Ok(out)
}

/// Batch mean of `Σ_i Σ_j (τ_{i+1} − τ_i)·ρ_{τ̂_j}^κ(y_i − z_j)` for predicted
/// quantiles `z` at the current fractions' midpoints and targets `y` at the
/// target fractions.
pub fn quantile_huber_loss_value(
    z: &Matrix,
    targets: &Matrix,
    current: &FractionBatch,
    target_fractions: &FractionBatch,
    kappa: f64,
) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(invalid("kappa", "must be positive"));
    }
    if z.rows() == 0 {
        return Err(Error::Empty { what: "critic batch" });
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let loss = tape.quantile_huber(zv, targets.clone(), current.tau_hat().clone(), target_fractions.weights(), kappa);
    Ok(tape.scalar(loss))
}

/// Quantile Huber loss of one critic and its gradient in `w`. Targets are
/// constants, so nothing flows into `w̄` or `θ̄`.
pub fn critic_loss_and_grad(
    net: &QuantileNet,
    params: &ParamVector,
    sa: &Matrix,
    targets: &Matrix,
    current: &FractionBatch,
    target_fractions: &FractionBatch,
    kappa: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(kappa > 0.0) {
        return Err(invalid("kappa", "must be positive"));
    }
    if sa.rows() == 0 {
        return Err(Error::Empty { what: "critic batch" });
    }
    loss_gradients(params, |tape, vars| {
        let x = tape.constant(sa.clone());
        let z = net.quantiles_tape(tape, vars, x, current.tau_hat());
        Ok(tape.quantile_huber(z, targets.clone(), current.tau_hat().clone(), target_fractions.weights(), kappa))
    })
}

/// Fraction proposal for FQF: an MLP from the (detached) state-action
/// embedding to `M` logits; fractions are the cumulative softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionProposal {
    net: Mlp,
    pub params: ParamVector,
}

impl FractionProposal {
    pub fn new(embedding_dim: usize, hidden: usize, m: usize, rng: &mut Rng) -> Result<Self> {
        if m == 0 {
            return Err(invalid("num_quantiles", "must be at least 1"));
        }
        let mut params = ParamVector::new();
        let net = Mlp::append(&mut params, "", MlpSpec::new(vec![embedding_dim, hidden, m]), rng)?;
        Ok(Self { net, params })
    }

    pub fn from_params(params: ParamVector) -> Result<Self> {
        let spec = nn::spec_from_layout(&params, 0)?;
        let net = Mlp::bind(&params, 0, spec)?;
        Ok(Self { net, params })
    }

    pub fn num_quantiles(&self) -> usize {
        self.net.spec().output_dim()
    }

    /// Per-sample fractions for each embedding row.
    pub fn fractions(&self, emb: &Matrix) -> Result<FractionBatch> {
        let logits = self.net.forward(&self.params, emb);
        let mut sets = Vec::with_capacity(logits.rows());
        for i in 0..logits.rows() {
            sets.push(QuantileFractions::from_tau(cumulative_softmax(logits.row(i)))?);
        }
        Ok(FractionBatch::per_sample(&sets))
    }

    /// One step on the fraction loss using
    /// `∂W₁/∂τ_i = 2Z(τ_i) − Z(τ̂_i) − Z(τ̂_{i−1})` for the interior fractions.
    /// `z_tau` holds `Z` at the interior `τ_1..τ_{M−1}` and `z_tau_hat` at the
    /// midpoints, both `B × ·`.
    pub fn update(&mut self, emb: &Matrix, z_tau: &Matrix, z_tau_hat: &Matrix, opt: &mut Optimizer) -> Result<()> {
        let m = self.num_quantiles();
        if m < 2 {
            return Ok(());
        }
        let b = emb.rows();
        let mut coef = Matrix::zeros(b, m);
        for r in 0..b {
            for i in 1..m {
                let g = 2.0 * z_tau.get(r, i - 1) - z_tau_hat.get(r, i) - z_tau_hat.get(r, i - 1);
                coef.set(r, i - 1, g);
            }
        }
        let (_, grad) = loss_gradients(&self.params, |tape, vars| {
            let x = tape.constant(emb.clone());
            let logits = self.net.forward_tape(tape, vars, x);
            let p = tape.softmax(logits);
            let tau = tape.cumsum_rows(p);
            let s = tape.weighted_row_sum(tau, coef);
            Ok(tape.mean(s))
        })?;
        opt.step(self.params.values_mut(), &grad)
    }
}

fn cumulative_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| math::exp(l - max)).collect();
    let total: f64 = e.iter().sum();
    let mut tau = Vec::with_capacity(logits.len() + 1);
    tau.push(0.0);
    let mut acc = 0.0;
    for v in &e[..e.len() - 1] {
        acc += v / total;
        tau.push(acc);
    }
    tau.push(1.0);
    tau
}
