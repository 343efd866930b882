mod common;

use common::{brute_force_quantile_huber, quantile_loss_case};
use module_core::critic::{quantile_huber_loss_value, FractionBatch};
use module_core::nn::Matrix;
use module_core::rng::{stream, Stream};

#[test]
fn vectorized_loss_matches_double_loop() {
    let mut rng = stream(7, Stream::Init);
    let mut worst: f64 = 0.0;
    for m in 1..=8 {
        for _ in 0..50 {
            let c = quantile_loss_case(&mut rng, m);
            let z = Matrix::from_rows(&c.z);
            let t = Matrix::from_rows(&c.targets);
            let fast = quantile_huber_loss_value(
                &z,
                &t,
                &FractionBatch::shared(&c.current),
                &FractionBatch::shared(&c.target),
                c.kappa,
            )
            .unwrap();
            let naive = brute_force_quantile_huber(&c.z, &c.targets, &c.current.tau_hat, &c.target.tau, c.kappa);
            worst = worst.max((fast - naive).abs());
        }
    }
    assert!(worst <= 1e-10, "max deviation {worst:e}");
}

#[test]
fn per_sample_fractions_match_row_by_row_loss() {
    let mut rng = stream(8, Stream::Init);
    for m in 1..=6 {
        let cases: Vec<_> = (0..4).map(|_| quantile_loss_case(&mut rng, m)).collect();
        // One row from each case, with that case's own fractions.
        let n = cases.iter().map(|c| c.targets[0].len()).min().unwrap();
        let kappa = cases[0].kappa;
        let z: Vec<Vec<f64>> = cases.iter().map(|c| c.z[0].clone()).collect();
        let t: Vec<Vec<f64>> = cases.iter().map(|c| c.targets[0][..n].to_vec()).collect();
        let target_sets: Vec<_> = (0..4)
            .map(|_| module_core::critic::generate_fractions(module_core::critic::FractionMode::Iqn, n, &mut rng).unwrap())
            .collect();
        let current_sets: Vec<_> = cases.iter().map(|c| c.current.clone()).collect();
        let fast = quantile_huber_loss_value(
            &Matrix::from_rows(&z),
            &Matrix::from_rows(&t),
            &FractionBatch::per_sample(&current_sets),
            &FractionBatch::per_sample(&target_sets),
            kappa,
        )
        .unwrap();
        let naive: f64 = (0..4)
            .map(|b| {
                brute_force_quantile_huber(
                    &z[b..=b],
                    &t[b..=b],
                    &current_sets[b].tau_hat,
                    &target_sets[b].tau,
                    kappa,
                )
            })
            .sum::<f64>()
            / 4.0;
        assert!((fast - naive).abs() <= 1e-10, "m {m}: {fast} vs {naive}");
    }
}
