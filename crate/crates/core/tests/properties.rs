use std::collections::VecDeque;

use module_core::actor::{temperature_loss_and_grad, Policy};
use module_core::critic::{
    compute_target_quantiles, generate_fractions, huber, quantile_huber_loss_value, CriticArch, FractionBatch,
    FractionMode, QuantileFractions, QuantileNet,
};
use module_core::data::{ObservationPair, ReplayBuffer, Transition};
use module_core::diagnostics::{
    empirical_lfo_reward_distance, estimate_state_transition_distribution, state_transition_error, HistogramGrid,
    RewardFunctionSet,
};
use module_core::env::{EnvKind, Environment, PointMass2D};
use module_core::nn::{adam_step, polyak_update, AdamConfig, AdamState, Matrix, MlpSpec, ParamVector};
use module_core::reward::RewardParams;
use module_core::risk::{distortion_g, risk_value, soft_q, RiskKind, RiskMeasure};
use module_core::rng::{stream, Stream};
use proptest::prelude::*;

fn finite(range: f64) -> impl Strategy<Value = f64> {
    -range..range
}

fn fractions(m: usize, seed: u64) -> QuantileFractions {
    generate_fractions(FractionMode::Iqn, m, &mut stream(seed, Stream::Fractions)).unwrap()
}

fn distorted_measure() -> impl Strategy<Value = RiskMeasure> {
    prop_oneof![
        (0.05f64..0.95).prop_map(|b| RiskMeasure::new(RiskKind::CVaR, b).unwrap()),
        (-1.5f64..1.5).prop_map(|b| RiskMeasure::new(RiskKind::Wang, b).unwrap()),
        (0.3f64..1.0).prop_map(|b| RiskMeasure::new(RiskKind::Cpw, b).unwrap()),
        Just(RiskMeasure::NEUTRAL),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_is_deterministic(seed in any::<u64>(), x in prop::collection::vec(finite(3.0), 3)) {
        let spec = MlpSpec::new(vec![3, 5, 2]);
        let p = module_core::nn::init_mlp(&spec, &mut stream(seed, Stream::Init)).unwrap();
        let a = module_core::nn::mlp_forward(&p, &spec, &x).unwrap();
        let b = module_core::nn::mlp_forward(&p, &spec, &x).unwrap();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn adam_stays_finite(
        params in prop::collection::vec(finite(1e6), 1..8),
        grads in prop::collection::vec(prop_oneof![finite(1e8), Just(0.0)], 8),
        steps in 1usize..20,
    ) {
        let mut p = params.clone();
        let g = &grads[..p.len()];
        let mut state = AdamState::new(p.len(), AdamConfig::default());
        for _ in 0..steps {
            let (next, next_state) = adam_step(&p, g, &state).unwrap();
            p = next;
            state = next_state;
        }
        prop_assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn point_mass_reward_is_nonpositive(
        s in prop::collection::vec(finite(5.0), 4),
        a in prop::collection::vec(finite(1.0), 2),
    ) {
        let (_, r) = PointMass2D::transition(&[s[0], s[1], s[2], s[3]], &a);
        prop_assert!(r <= 0.0);
    }

    #[test]
    fn replaying_actions_reproduces_trajectory(seed in any::<u64>(), actions in prop::collection::vec(finite(1.0), 40)) {
        for kind in [EnvKind::PointMass2D, EnvKind::Pendulum] {
            let run = || {
                let mut env = kind.make();
                let d = env.spec().action_dim;
                let mut states = vec![env.reset(seed)];
                for a in actions.chunks(2) {
                    states.push(env.step(&a[..d]).unwrap().next_state);
                }
                states
            };
            let (x, y) = (run(), run());
            for (p, q) in x.iter().zip(&y) {
                prop_assert_eq!(p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), q.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn buffer_matches_list_slicing(capacity in 1usize..40, pushes in 0usize..200) {
        let mut buf = ReplayBuffer::new(capacity, 1, 1);
        let mut all = Vec::new();
        for i in 0..pushes {
            let t = Transition { s: vec![i as f64], a: vec![0.0], r_env: None, s_next: vec![i as f64 + 1.0], done: false };
            buf.push(t.clone()).unwrap();
            all.push(t);
        }
        prop_assert_eq!(buf.len(), pushes.min(capacity));
        let tail = &all[all.len().saturating_sub(capacity)..];
        prop_assert!(buf.iter().eq(tail.iter()));
    }

    #[test]
    fn reward_loss_decomposes(
        seed in any::<u64>(),
        mu in 0.0f64..1.0,
        e in prop::collection::vec(finite(2.0), 4..20),
        a in prop::collection::vec(finite(2.0), 4..20),
    ) {
        let r = RewardParams::new(2, &[4, 3], mu, &mut stream(seed, Stream::Init)).unwrap();
        let pairs = |v: &[f64]| -> Vec<ObservationPair> {
            v.chunks_exact(4).map(|c| ObservationPair::new(c[..2].to_vec(), c[2..].to_vec())).collect()
        };
        let (ep, ap) = (pairs(&e), pairs(&a));
        let mean = |ps: &[ObservationPair]| ps.iter().map(|p| r.reward_value(&p.s, &p.s_next).unwrap()).sum::<f64>() / ps.len() as f64;
        let norm: f64 = r.params.values().iter().map(|v| v * v).sum();
        let expected = mean(&ap) - mean(&ep) + 0.5 * mu * norm;
        prop_assert!((r.reward_loss(&ep, &ap).unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn labels_ignore_actions(seed in any::<u64>(), s in prop::collection::vec(finite(2.0), 4), a1 in finite(1.0), a2 in finite(1.0)) {
        let r = RewardParams::new(2, &[4], 1e-4, &mut stream(seed, Stream::Init)).unwrap();
        let t1 = Transition { s: s[..2].to_vec(), a: vec![a1], r_env: None, s_next: s[2..].to_vec(), done: false };
        let t2 = Transition { a: vec![a2], ..t1.clone() };
        let l = r.label_transitions(&[&t1, &t2]).unwrap();
        prop_assert_eq!(l[0].to_bits(), l[1].to_bits());
    }

    #[test]
    fn quantile_loss_is_nonnegative(
        seed in any::<u64>(),
        z in prop::collection::vec(finite(5.0), 6),
        t in prop::collection::vec(finite(5.0), 4),
        kappa in 0.1f64..3.0,
    ) {
        let cur = FractionBatch::shared(&fractions(3, seed));
        let tgt = FractionBatch::shared(&fractions(2, seed ^ 1));
        let loss = quantile_huber_loss_value(&Matrix::from_vec(2, 3, z), &Matrix::from_vec(2, 2, t), &cur, &tgt, kappa).unwrap();
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn quantile_loss_vanishes_on_equal_values(seed in any::<u64>(), v in finite(5.0), kappa in 0.1f64..3.0) {
        let cur = FractionBatch::shared(&fractions(4, seed));
        let tgt = FractionBatch::shared(&fractions(3, seed ^ 1));
        let loss = quantile_huber_loss_value(&Matrix::from_vec(1, 4, vec![v; 4]), &Matrix::from_vec(1, 3, vec![v; 3]), &cur, &tgt, kappa).unwrap();
        prop_assert_eq!(loss, 0.0);
    }

    #[test]
    fn huber_is_continuous_at_kappa(kappa in 0.01f64..10.0) {
        let inside = huber(kappa, kappa).unwrap();
        let outside = huber(kappa * (1.0 + 1e-15), kappa).unwrap();
        prop_assert!((inside - outside).abs() <= 1e-15 * kappa.max(1.0) * kappa.max(1.0) * 8.0);
        prop_assert!((inside - 0.5 * kappa * kappa).abs() <= 1e-15 * kappa * kappa);
    }

    #[test]
    fn fraction_masses_sum_to_one(seed in any::<u64>(), m in 1usize..64) {
        for mode in [FractionMode::Qrdqn, FractionMode::Iqn] {
            let f = generate_fractions(mode, m, &mut stream(seed, Stream::Fractions)).unwrap();
            prop_assert!((f.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_discount_returns_labels(seed in any::<u64>(), labels in prop::collection::vec(finite(10.0), 3), done in any::<bool>()) {
        let spec = EnvKind::PointMass2D.make().spec().clone();
        let mut rng = stream(seed, Stream::Init);
        let (policy, theta) = Policy::new(&spec, &[4], &mut rng).unwrap();
        let net = QuantileNet::new(CriticArch { state_dim: 4, action_dim: 2, hidden: 4, cos_dim: 3 });
        let w = net.init(&mut rng).unwrap();
        let next = Matrix::from_vec(3, 4, (0..12).map(|i| i as f64 * 0.1).collect());
        let noise = Matrix::zeros(3, 2);
        let tf = FractionBatch::shared(&fractions(5, seed));
        for (gamma, flags) in [(0.0, [false; 3]), (0.99, [true; 3]), (0.0, [done; 3])] {
            let y = compute_target_quantiles(&net, [&w, &w], &policy, &theta, &next, &flags, &labels, &tf, gamma, 0.3, &noise).unwrap();
            for (i, label) in labels.iter().enumerate() {
                for v in y.row(i) {
                    prop_assert!((v - label).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn distortions_are_monotone_cdfs(m in distorted_measure()) {
        prop_assume!(m.kind.is_distortion());
        let mut prev = distortion_g(m.kind, m.beta, 0.0).unwrap();
        prop_assert!(prev.abs() <= 1e-12);
        for i in 1..=1000 {
            let g = distortion_g(m.kind, m.beta, i as f64 / 1000.0).unwrap();
            prop_assert!(g >= prev - 1e-15);
            prev = g;
        }
        prop_assert!((prev - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn distorted_values_are_translation_equivariant(
        seed in any::<u64>(),
        z in prop::collection::vec(finite(10.0), 8),
        c in finite(100.0),
        m in distorted_measure(),
    ) {
        let f = fractions(8, seed);
        let mut sorted = z.clone();
        sorted.sort_by(f64::total_cmp);
        let shifted: Vec<f64> = sorted.iter().map(|v| v + c).collect();
        let base = risk_value(&sorted, &f, &m).unwrap();
        prop_assert!((risk_value(&shifted, &f, &m).unwrap() - base - c).abs() <= 1e-9);
    }

    #[test]
    fn cvar_one_is_neutral(seed in any::<u64>(), z in prop::collection::vec(finite(10.0), 1..16)) {
        let f = fractions(z.len(), seed);
        let cvar = risk_value(&z, &f, &RiskMeasure::new(RiskKind::CVaR, 1.0).unwrap()).unwrap();
        let neutral = risk_value(&z, &f, &RiskMeasure::NEUTRAL).unwrap();
        prop_assert!((cvar - neutral).abs() <= 1e-9);
    }

    #[test]
    fn soft_q_is_below_each_critic(seed in any::<u64>(), s in prop::collection::vec(finite(2.0), 3), a in finite(1.0), m in distorted_measure()) {
        let net = QuantileNet::new(CriticArch { state_dim: 3, action_dim: 1, hidden: 5, cos_dim: 4 });
        let mut rng = stream(seed, Stream::Init);
        let (w1, w2) = (net.init(&mut rng).unwrap(), net.init(&mut rng).unwrap());
        let f = fractions(6, seed);
        let q = soft_q(&net, [&w1, &w2], &s, &[a], &f, &m).unwrap();
        let points = Matrix::row_vector(f.tau_hat.clone());
        let sa = module_core::critic::concat_rows(&[&s], &[&[a]]);
        for w in [&w1, &w2] {
            let z = net.quantiles(w, &sa, &points);
            prop_assert!(q <= risk_value(z.row(0), &f, &m).unwrap());
        }
    }

    #[test]
    fn sampled_actions_are_inside_bounds(seed in any::<u64>(), s in prop::collection::vec(finite(50.0), 4), scale in 0.0f64..100.0) {
        let spec = EnvKind::PointMass2D.make().spec().clone();
        let mut rng = stream(seed, Stream::Init);
        let (policy, mut theta) = Policy::new(&spec, &[6], &mut rng).unwrap();
        theta.values_mut().iter_mut().for_each(|v| *v *= scale);
        let (a, lp) = policy.sample_action(&theta, &s, &mut rng).unwrap();
        prop_assert!(lp.is_finite());
        for (j, v) in a.iter().enumerate() {
            prop_assert!(*v > spec.action_low[j] && *v < spec.action_high[j], "{v}");
        }
    }

    #[test]
    fn temperature_gradient_sign(log_alpha in -5.0f64..3.0, h0 in -4.0f64..0.0, lp in prop::collection::vec(finite(6.0), 1..32)) {
        let (_, d) = temperature_loss_and_grad(log_alpha, h0, &lp).unwrap();
        let entropy = -lp.iter().sum::<f64>() / lp.len() as f64;
        prop_assert!((d - (entropy - h0)).abs() <= 1e-12);
        prop_assert_eq!((-d).partial_cmp(&0.0), (h0 - entropy).partial_cmp(&0.0));
    }

    #[test]
    fn polyak_matches_recurrence(src in prop::collection::vec(finite(10.0), 1..16), iota in 0.001f64..1.0, steps in 1usize..10) {
        let mut s = ParamVector::new();
        s.push_segment("w", vec![src.len()], src.clone());
        let mut t = s.clone();
        t.fill(0.5);
        let mut shadow = vec![0.5; src.len()];
        for _ in 0..steps {
            polyak_update(&s, &mut t, iota).unwrap();
            for (x, y) in shadow.iter_mut().zip(&src) {
                *x = iota * y + (1.0 - iota) * *x;
            }
        }
        for (x, y) in t.values().iter().zip(&shadow) {
            prop_assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
        }
    }

    #[test]
    fn lfo_distance_is_nonnegative(a in prop::collection::vec(finite(5.0), 2..20), b in prop::collection::vec(finite(5.0), 2..20), k in finite(3.0)) {
        let pairs = |v: &[f64]| -> Vec<ObservationPair> {
            v.chunks_exact(2).map(|c| ObservationPair::new(vec![c[0]], vec![c[1]])).collect()
        };
        let (pa, pb) = (pairs(&a), pairs(&b));
        let set = RewardFunctionSet::new().with_fn(move |s, sn| k * s[0] - sn[0]);
        prop_assert!(empirical_lfo_reward_distance(&set, &pa, &pb).unwrap() >= 0.0);
        prop_assert_eq!(empirical_lfo_reward_distance(&set, &pa, &pa).unwrap(), 0.0);
    }

    #[test]
    fn histograms_are_normalized(
        traj in prop::collection::vec(prop::collection::vec(finite(6.0), 4), 2..30),
        gamma in 0.0f64..0.999,
    ) {
        let grid = HistogramGrid::point_mass_positions();
        let h = estimate_state_transition_distribution(&[traj], &grid, gamma).unwrap();
        prop_assert!((h.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(h.weights.iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn transition_error_is_nonpositive_with_expert_candidate(
        r in prop::collection::vec(0.0f64..5.0, 6),
        e in prop::collection::vec(0.01f64..1.0, 6),
        p in prop::collection::vec(0.01f64..1.0, 6),
    ) {
        let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
        let (e, p) = (norm(&e), norm(&p));
        prop_assume!(r.iter().sum::<f64>() > 0.0);
        let err = state_transition_error(&r, &e, &[&p, &e]).unwrap();
        prop_assert!(err <= 1e-12);
    }
}

#[test]
fn fifo_matches_oracle_over_ten_thousand_pushes() {
    let mut buf = ReplayBuffer::new(1000, 1, 1);
    let mut oracle: VecDeque<f64> = VecDeque::new();
    for i in 0..10_000 {
        let x = i as f64;
        buf.push(Transition {
            s: vec![x],
            a: vec![0.0],
            r_env: None,
            s_next: vec![x + 1.0],
            done: false,
        })
        .unwrap();
        oracle.push_back(x);
        if oracle.len() > 1000 {
            oracle.pop_front();
        }
    }
    assert_eq!(buf.len(), 1000);
    assert!(buf.iter().map(|t| t.s[0]).eq(oracle.iter().copied()));
}

#[test]
fn episode_ends_at_horizon() {
    for kind in [EnvKind::PointMass2D, EnvKind::Pendulum] {
        let mut env = kind.make();
        let horizon = env.spec().horizon;
        env.reset(3);
        let zero = vec![0.0; env.spec().action_dim];
        for t in 1..=horizon {
            let r = env.step(&zero).unwrap();
            assert_eq!(r.done, t == horizon, "{kind:?} step {t}");
        }
    }
}
