//! Independent oracles shared by the integration tests and the acceptance
//! suite: central finite differences, a randomized family of gradient
//! cases and a double-loop quantile Huber loss.

#![allow(dead_code)]

use module_core::actor::{policy_loss, Policy};
use module_core::critic::{
    critic_loss_and_grad, generate_fractions, CriticArch, FractionBatch, FractionMode, QuantileFractions, QuantileNet,
};
use module_core::env::{EnvSpec, Environment, EnvKind};
use module_core::nn::{loss_gradients, Activation, Matrix, Mlp, MlpSpec, ParamVector};
use module_core::qcritic::QNet;
use module_core::reward::RewardParams;
use module_core::risk::{FractionSource, RiskKind, RiskMeasure, RiskSoftQ};
use module_core::rng::{standard_normal, stream, uniform, Rng, Stream};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` at every coordinate of `params`.
pub fn fd_gradient(params: &ParamVector, h: f64, f: impl Fn(&ParamVector) -> f64) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.len())
        .map(|i| {
            let x = params.values()[i];
            p.values_mut()[i] = x + h;
            let up = f(&p);
            p.values_mut()[i] = x - h;
            let down = f(&p);
            p.values_mut()[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub type LossFn = Box<dyn Fn(&ParamVector) -> (f64, Vec<f64>)>;

pub struct GradientCase {
    pub name: String,
    pub params: ParamVector,
    pub loss: LossFn,
}

impl GradientCase {
    /// Relative error between the analytic gradient and finite differences.
    pub fn check(&self) -> f64 {
        let (_, analytic) = (self.loss)(&self.params);
        let numeric = fd_gradient(&self.params, FD_STEP, |p| (self.loss)(p).0);
        relative_error(&analytic, &numeric, 1e-8)
    }
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| scale * standard_normal(rng)).collect())
}

fn activation(rng: &mut Rng) -> Activation {
    match rng.random_range(0..3) {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        _ => Activation::Identity,
    }
}

fn widths(rng: &mut Rng, max_layers: usize, max_width: usize) -> Vec<usize> {
    (0..rng.random_range(1..=max_layers)).map(|_| rng.random_range(1..=max_width)).collect()
}

fn mlp_case(rng: &mut Rng) -> GradientCase {
    let input = rng.random_range(1..5);
    let output = rng.random_range(1..4);
    let mut sizes = vec![input];
    sizes.extend(widths(rng, 3, 6));
    sizes.push(output);
    let spec = MlpSpec::new(sizes).with_hidden(activation(rng)).with_output(activation(rng));
    let mut params = ParamVector::new();
    let net = Mlp::append(&mut params, "", spec, rng).unwrap();
    let batch = rng.random_range(1..6);
    let x = gaussian_matrix(rng, batch, input, 1.0);
    let y = gaussian_matrix(rng, batch, output, 1.0);
    GradientCase {
        name: "mlp squared error".into(),
        params,
        loss: Box::new(move |p| {
            loss_gradients(p, |tape, vars| {
                let xv = tape.constant(x.clone());
                let out = net.forward_tape(tape, vars, xv);
                let yv = tape.constant(y.clone());
                let d = tape.sub(out, yv);
                let sq = tape.square(d);
                Ok(tape.mean(sq))
            })
            .unwrap()
        }),
    }
}

fn reward_case(rng: &mut Rng) -> GradientCase {
    let d = rng.random_range(1..4);
    let hidden = widths(rng, 2, 5);
    let mu = uniform(rng, 0.0, 0.1);
    let r = RewardParams::new(d, &hidden, mu, rng).unwrap();
    let (ne, na) = (rng.random_range(1..6), rng.random_range(1..6));
    let e = gaussian_matrix(rng, ne, 2 * d, 1.0);
    let a = gaussian_matrix(rng, na, 2 * d, 1.0);
    let params = r.params.clone();
    GradientCase {
        name: "reward loss".into(),
        params,
        loss: Box::new(move |p| {
            let mut r = r.clone();
            r.params = p.clone();
            r.loss_and_grad(&e, &a).unwrap()
        }),
    }
}

fn random_arch(rng: &mut Rng) -> CriticArch {
    CriticArch {
        state_dim: rng.random_range(1..4),
        action_dim: rng.random_range(1..3),
        hidden: rng.random_range(2..6),
        cos_dim: rng.random_range(1..6),
    }
}

fn random_batch(rng: &mut Rng, b: usize, m: usize) -> FractionBatch {
    if rng.random_bool(0.5) {
        FractionBatch::shared(&generate_fractions(FractionMode::Iqn, m, rng).unwrap())
    } else {
        let sets: Vec<QuantileFractions> = (0..b)
            .map(|_| generate_fractions(FractionMode::Iqn, m, rng).unwrap())
            .collect();
        FractionBatch::per_sample(&sets)
    }
}

fn critic_case(rng: &mut Rng) -> GradientCase {
    let arch = random_arch(rng);
    let net = QuantileNet::new(arch);
    let params = net.init(rng).unwrap();
    let b = rng.random_range(1..5);
    let (m, n) = (rng.random_range(1..6), rng.random_range(1..6));
    let sa = gaussian_matrix(rng, b, arch.state_dim + arch.action_dim, 1.0);
    let current = random_batch(rng, b, m);
    let target = random_batch(rng, b, n);
    let targets = gaussian_matrix(rng, b, n, 1.5);
    let kappa = uniform(rng, 0.2, 2.0);
    GradientCase {
        name: "quantile critic loss".into(),
        params,
        loss: Box::new(move |p| critic_loss_and_grad(&net, p, &sa, &targets, &current, &target, kappa).unwrap()),
    }
}

fn qnet_case(rng: &mut Rng) -> GradientCase {
    let (sd, ad) = (rng.random_range(1..4), rng.random_range(1..3));
    let hidden = widths(rng, 2, 6);
    let (net, params) = QNet::new(sd, ad, &hidden, rng).unwrap();
    let b = rng.random_range(1..6);
    let sa = gaussian_matrix(rng, b, sd + ad, 1.0);
    let y: Vec<f64> = (0..b).map(|_| standard_normal(rng)).collect();
    GradientCase {
        name: "soft bellman residual".into(),
        params,
        loss: Box::new(move |p| net.loss_and_grad(p, &sa, &y).unwrap()),
    }
}

fn random_measure(rng: &mut Rng) -> RiskMeasure {
    let choices = [
        RiskMeasure::NEUTRAL,
        RiskMeasure::new(RiskKind::MeanVariance, uniform(rng, -0.2, 0.2)).unwrap(),
        RiskMeasure::new(RiskKind::VaR, uniform(rng, 0.05, 0.95)).unwrap(),
        RiskMeasure::new(RiskKind::Cpw, uniform(rng, 0.4, 0.9)).unwrap(),
        RiskMeasure::new(RiskKind::Wang, uniform(rng, -1.0, 1.0)).unwrap(),
        RiskMeasure::new(RiskKind::CVaR, uniform(rng, 0.1, 1.0)).unwrap(),
    ];
    choices[rng.random_range(0..choices.len())]
}

fn policy_case(rng: &mut Rng) -> GradientCase {
    let spec: EnvSpec = if rng.random_bool(0.5) {
        EnvKind::PointMass2D.make().spec().clone()
    } else {
        EnvKind::Pendulum.make().spec().clone()
    };
    let hidden = widths(rng, 2, 5);
    let (policy, theta) = Policy::new(&spec, &hidden, rng).unwrap();
    let arch = CriticArch {
        state_dim: spec.state_dim,
        action_dim: spec.action_dim,
        hidden: rng.random_range(2..5),
        cos_dim: rng.random_range(1..5),
    };
    let net = QuantileNet::new(arch);
    let w1 = net.init(rng).unwrap();
    let w2 = net.init(rng).unwrap();
    let b = rng.random_range(1..5);
    let m = rng.random_range(2..6);
    let fractions = random_batch(rng, b, m);
    let measure = random_measure(rng);
    let alpha = uniform(rng, 0.05, 1.0);
    let states = gaussian_matrix(rng, b, spec.state_dim, 1.0);
    let noise = gaussian_matrix(rng, b, spec.action_dim, 1.0);
    GradientCase {
        name: format!("policy loss under {measure}"),
        params: theta,
        loss: Box::new(move |p| {
            let q = RiskSoftQ {
                net: &net,
                critics: [&w1, &w2],
                fractions: FractionSource::Fixed(&fractions),
                measure,
            };
            let l = policy_loss(&policy, p, &q, alpha, &states, &noise).unwrap();
            (l.loss, l.grad)
        }),
    }
}

/// Softmax, cumulative sums, elementwise maps and a weighted row sum over a
/// free parameter block.
fn tape_ops_case(rng: &mut Rng) -> GradientCase {
    let (rows, cols) = (rng.random_range(1..4), rng.random_range(2..6));
    let mut params = ParamVector::new();
    params.push_segment("x", vec![rows, cols], (0..rows * cols).map(|_| standard_normal(rng)).collect());
    params.push_segment("y", vec![rows, cols], (0..rows * cols).map(|_| standard_normal(rng)).collect());
    let weights = Matrix::from_vec(1, cols, (0..cols).map(|_| uniform(rng, -1.0, 1.0)).collect());
    let kappa = uniform(rng, 0.3, 2.0);
    GradientCase {
        name: "tape op composite".into(),
        params,
        loss: Box::new(move |p| {
            loss_gradients(p, |tape, vars| {
                let x = vars.get(0);
                let y = vars.get(1);
                let s = tape.softmax(x);
                let c = tape.cumsum_rows(s);
                let t = tape.tanh(y);
                let e = tape.exp(t);
                let prod = tape.mul(c, e);
                let sq = tape.square(y);
                let shifted = tape.add_scalar(sq, 1.0);
                let r = tape.sqrt(shifted);
                let l = tape.log(r);
                let h = tape.huber(y, kappa);
                let mn = tape.min(l, h);
                let sum = tape.add(prod, mn);
                let w = tape.weighted_row_sum(sum, weights.clone());
                Ok(tape.sum(w))
            })
            .unwrap()
        }),
    }
}

/// `n` cases cycling through every loss family, seeded.
pub fn gradient_cases(n: usize, seed: u64) -> Vec<GradientCase> {
    let mut rng = stream(seed, Stream::Init);
    (0..n)
        .map(|i| match i % 6 {
            0 => mlp_case(&mut rng),
            1 => reward_case(&mut rng),
            2 => critic_case(&mut rng),
            3 => qnet_case(&mut rng),
            4 => policy_case(&mut rng),
            _ => tape_ops_case(&mut rng),
        })
        .collect()
}

/// Naive quantile Huber loss:
/// `(1/B) Σ_b Σ_i Σ_j (τ'_{i+1} − τ'_i) · |τ̂_j − 1{u < 0}| · L_κ(u) / κ`
/// with `u = y_{b,i} − z_{b,j}`.
pub fn brute_force_quantile_huber(
    z: &[Vec<f64>],
    targets: &[Vec<f64>],
    tau_hat: &[f64],
    target_tau: &[f64],
    kappa: f64,
) -> f64 {
    let mut total = 0.0;
    for b in 0..z.len() {
        for i in 0..targets[b].len() {
            let w = target_tau[i + 1] - target_tau[i];
            for j in 0..z[b].len() {
                let u = targets[b][i] - z[b][j];
                let huber = if u.abs() <= kappa {
                    0.5 * u * u
                } else {
                    kappa * (u.abs() - 0.5 * kappa)
                };
                let indicator = if u < 0.0 { 1.0 } else { 0.0 };
                total += w * (tau_hat[j] - indicator).abs() * huber / kappa;
            }
        }
    }
    total / z.len() as f64
}

/// Fresh random `(z, targets, current, target, κ)` for the loss oracle.
pub struct QuantileLossCase {
    pub z: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub current: QuantileFractions,
    pub target: QuantileFractions,
    pub kappa: f64,
}

pub fn quantile_loss_case(rng: &mut Rng, m: usize) -> QuantileLossCase {
    let b = rng.random_range(1..6);
    let n = rng.random_range(1..=8);
    let mode = if rng.random_bool(0.5) {
        FractionMode::Iqn
    } else {
        FractionMode::Qrdqn
    };
    let current = generate_fractions(mode, m, rng).unwrap();
    let target = generate_fractions(FractionMode::Iqn, n, rng).unwrap();
    let z = (0..b).map(|_| (0..m).map(|_| 2.0 * standard_normal(rng)).collect()).collect();
    let targets = (0..b).map(|_| (0..n).map(|_| 2.0 * standard_normal(rng)).collect()).collect();
    QuantileLossCase {
        z,
        targets,
        current,
        target,
        kappa: uniform(rng, 0.1, 3.0),
    }
}
