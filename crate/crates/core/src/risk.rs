//! Risk measures `Ψ` over quantile return distributions and the risk soft
//! action-value `Q(s, a) = min_k Ψ[Z_{τ,w_k}(s, a)]`.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::actor::SoftQ;
use crate::critic::{FractionBatch, FractionProposal, QuantileFractions, QuantileNet};
use crate::error::{check_dim, invalid, Error, Result};
use crate::math::{self, normal_cdf, normal_quantile};
use crate::nn::{Matrix, ParamVector, Tape, Var};

/// Keeps the tape square root of the variance differentiable at zero spread.
pub const VARIANCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum RiskKind {
    #[cfg_attr(feature = "serde", serde(rename = "neutral"))]
    Neutral,
    #[cfg_attr(feature = "serde", serde(rename = "mean-variance"))]
    MeanVariance,
    #[cfg_attr(feature = "serde", serde(rename = "var"))]
    VaR,
    #[cfg_attr(feature = "serde", serde(rename = "cpw"))]
    Cpw,
    #[cfg_attr(feature = "serde", serde(rename = "wang"))]
    Wang,
    #[cfg_attr(feature = "serde", serde(rename = "cvar"))]
    CVaR,
}

impl RiskKind {
    pub fn id(self) -> &'static str {
        match self {
            RiskKind::Neutral => "neutral",
            RiskKind::MeanVariance => "mean-variance",
            RiskKind::VaR => "var",
            RiskKind::Cpw => "cpw",
            RiskKind::Wang => "wang",
            RiskKind::CVaR => "cvar",
        }
    }

    /// Whether the measure is a distorted expectation `∫ F⁻¹(τ) dg(τ)`.
    pub fn is_distortion(self) -> bool {
        matches!(self, RiskKind::Cpw | RiskKind::Wang | RiskKind::CVaR)
    }
}

impl fmt::Display for RiskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for RiskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            RiskKind::Neutral,
            RiskKind::MeanVariance,
            RiskKind::VaR,
            RiskKind::Cpw,
            RiskKind::Wang,
            RiskKind::CVaR,
        ]
        .into_iter()
        .find(|k| k.id() == s)
        .ok_or_else(|| invalid("risk_measure", "must be one of neutral, mean-variance, var, cpw, wang, cvar"))
    }
}

/// A risk measure and its parameter (ignored for `Neutral`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskMeasure {
    pub kind: RiskKind,
    pub beta: f64,
}

impl Default for RiskMeasure {
    fn default() -> Self {
        Self::NEUTRAL
    }
}

impl RiskMeasure {
    pub const NEUTRAL: Self = Self {
        kind: RiskKind::Neutral,
        beta: 0.0,
    };

    pub fn new(kind: RiskKind, beta: f64) -> Result<Self> {
        let m = Self { kind, beta };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.beta;
        let ok = match self.kind {
            RiskKind::Neutral => true,
            RiskKind::MeanVariance | RiskKind::Wang => b.is_finite(),
            RiskKind::VaR => b > 0.0 && b < 1.0,
            RiskKind::Cpw => b > 0.0 && b.is_finite(),
            RiskKind::CVaR => b > 0.0 && b <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            let reason = match self.kind {
                RiskKind::VaR => "must lie in (0, 1) for var",
                RiskKind::Cpw => "must be positive for cpw",
                RiskKind::CVaR => "must lie in (0, 1] for cvar",
                _ => "must be finite",
            };
            Err(invalid("beta", reason))
        }
    }

    /// Risk-averse settings: mean-variance 0.1, VaR 0.25, CPW 0.71, Wang
    /// 0.75, CVaR 0.25.
    pub fn risk_averse() -> [Self; 5] {
        [
            Self { kind: RiskKind::MeanVariance, beta: 0.1 },
            Self { kind: RiskKind::VaR, beta: 0.25 },
            Self { kind: RiskKind::Cpw, beta: 0.71 },
            Self { kind: RiskKind::Wang, beta: 0.75 },
            Self { kind: RiskKind::CVaR, beta: 0.25 },
        ]
    }

    /// Risk-seeking settings: mean-variance −0.1, VaR 0.75, Wang −0.75.
    pub fn risk_seeking() -> [Self; 3] {
        [
            Self { kind: RiskKind::MeanVariance, beta: -0.1 },
            Self { kind: RiskKind::VaR, beta: 0.75 },
            Self { kind: RiskKind::Wang, beta: -0.75 },
        ]
    }
}

impl fmt::Display for RiskMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            RiskKind::Neutral => f.write_str("neutral"),
            k => write!(f, "{k}({})", self.beta),
        }
    }
}

/// Distortion function `g` for the distorted-expectation measures.
pub fn distortion_g(kind: RiskKind, beta: f64, tau: f64) -> Result<f64> {
    if !kind.is_distortion() {
        return Err(invalid("risk_measure", "must be a distorted expectation"));
    }
    RiskMeasure { kind, beta }.validate()?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid("tau", "must lie in [0, 1]"));
    }
    Ok(g_unchecked(kind, beta, tau))
}

fn g_unchecked(kind: RiskKind, beta: f64, tau: f64) -> f64 {
    if tau <= 0.0 {
        return 0.0;
    }
    if tau >= 1.0 {
        return 1.0;
    }
    let g = match kind {
        RiskKind::Cpw => {
            let a = math::powf(tau, beta);
            let b = math::powf(1.0 - tau, beta);
            a / math::powf(a + b, 1.0 / beta)
        }
        RiskKind::Wang => normal_cdf(normal_quantile(tau) + beta),
        RiskKind::CVaR => (tau / beta).min(1.0),
        _ => tau,
    };
    g.clamp(0.0, 1.0)
}

/// `Ψ` as a linear functional of the quantiles, `Σ_i c_i z_i`, for every
/// measure except mean-variance.
fn linear_weights(fractions: &QuantileFractions, measure: &RiskMeasure) -> Option<Vec<f64>> {
    let m = fractions.num_quantiles();
    match measure.kind {
        RiskKind::Neutral => Some(fractions.weights()),
        RiskKind::MeanVariance => None,
        RiskKind::VaR => {
            let th = &fractions.tau_hat;
            let mut c = alloc::vec![0.0; m];
            let beta = measure.beta;
            if beta <= th[0] {
                c[0] = 1.0;
            } else if beta >= th[m - 1] {
                c[m - 1] = 1.0;
            } else {
                let i = th.windows(2).position(|w| beta <= w[1]).expect("beta is bracketed");
                let lambda = (beta - th[i]) / (th[i + 1] - th[i]);
                c[i] = 1.0 - lambda;
                c[i + 1] = lambda;
            }
            Some(c)
        }
        k => Some(
            fractions
                .tau
                .windows(2)
                .map(|w| g_unchecked(k, measure.beta, w[1]) - g_unchecked(k, measure.beta, w[0]))
                .collect(),
        ),
    }
}

/// `Ψ` of one quantile vector `z_i` located at `fractions.tau_hat`.
pub fn risk_value(quantiles: &[f64], fractions: &QuantileFractions, measure: &RiskMeasure) -> Result<f64> {
    measure.validate()?;
    check_dim("quantiles", fractions.num_quantiles(), quantiles.len())?;
    if quantiles.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite { op: "risk quantiles" });
    }
    if let Some(c) = linear_weights(fractions, measure) {
        return Ok(c.iter().zip(quantiles).map(|(c, z)| c * z).sum());
    }
    let w = fractions.weights();
    let mean: f64 = w.iter().zip(quantiles).map(|(w, z)| w * z).sum();
    let var: f64 = w.iter().zip(quantiles).map(|(w, z)| w * (z - mean) * (z - mean)).sum();
    Ok(mean - measure.beta * math::sqrt(var))
}

/// Row-wise `Ψ` of `z` (`B × M`) on the tape; returns `B × 1`.
pub fn risk_value_tape(tape: &mut Tape, z: Var, fractions: &FractionBatch, measure: &RiskMeasure) -> Result<Var> {
    measure.validate()?;
    let rows = fractions.tau().rows();
    check_dim("risk fractions", tape.value(z).cols(), fractions.num_quantiles())?;
    if measure.kind == RiskKind::MeanVariance {
        let w = fractions.weights();
        let mean = tape.weighted_row_sum(z, w.clone());
        let centered = tape.sub_col(z, mean);
        let sq = tape.square(centered);
        let var = tape.weighted_row_sum(sq, w);
        let var = tape.add_scalar(var, VARIANCE_EPS);
        let sd = tape.sqrt(var);
        let pen = tape.scale(sd, -measure.beta);
        return Ok(tape.add(mean, pen));
    }
    let mut c = Matrix::zeros(rows, fractions.num_quantiles());
    for r in 0..rows {
        let row = linear_weights(&fractions.row(r), measure).expect("linear measure");
        c.row_mut(r).copy_from_slice(&row);
    }
    Ok(tape.weighted_row_sum(z, c))
}

/// `min_k Ψ[Z_{τ,w_k}(s, a)]` for a single state-action pair.
pub fn soft_q(
    net: &QuantileNet,
    critics: [&ParamVector; 2],
    s: &[f64],
    a: &[f64],
    fractions: &QuantileFractions,
    measure: &RiskMeasure,
) -> Result<f64> {
    let arch = net.arch();
    check_dim("soft_q state", arch.state_dim, s.len())?;
    check_dim("soft_q action", arch.action_dim, a.len())?;
    let sa = crate::critic::concat_rows(&[s], &[a]);
    let points = Matrix::row_vector(fractions.tau_hat.clone());
    let mut best = f64::INFINITY;
    for w in critics {
        let z = net.quantiles(w, &sa, &points);
        best = best.min(risk_value(z.row(0), fractions, measure)?);
    }
    Ok(best)
}

/// Where the policy objective takes its quantile fractions from.
#[derive(Debug, Clone, Copy)]
pub enum FractionSource<'a> {
    Fixed(&'a FractionBatch),
    /// FQF: per-sample fractions proposed from critic 1's embedding of
    /// `(s, ã)`, treated as constants.
    Proposal(&'a FractionProposal),
}

/// Risk soft action-value of the twin distributional critics, as the policy
/// objective.
#[derive(Debug, Clone, Copy)]
pub struct RiskSoftQ<'a> {
    pub net: &'a QuantileNet,
    pub critics: [&'a ParamVector; 2],
    pub fractions: FractionSource<'a>,
    pub measure: RiskMeasure,
}

impl SoftQ for RiskSoftQ<'_> {
    fn q_tape(&self, tape: &mut Tape, states: Var, actions: Var) -> Result<Var> {
        let sa = tape.concat_cols(states, actions);
        let v1 = tape.params(self.critics[0], false);
        let v2 = tape.params(self.critics[1], false);
        let emb1 = self.net.embedding_tape(tape, &v1, sa);
        let emb2 = self.net.embedding_tape(tape, &v2, sa);
        let proposed;
        let fractions = match self.fractions {
            FractionSource::Fixed(f) => f,
            FractionSource::Proposal(p) => {
                proposed = p.fractions(tape.value(emb1))?;
                &proposed
            }
        };
        let z1 = self.net.quantiles_from_embedding_tape(tape, &v1, emb1, fractions.tau_hat());
        let z2 = self.net.quantiles_from_embedding_tape(tape, &v2, emb2, fractions.tau_hat());
        let q1 = risk_value_tape(tape, z1, fractions, &self.measure)?;
        let q2 = risk_value_tape(tape, z2, fractions, &self.measure)?;
        Ok(tape.min(q1, q2))
    }
}
