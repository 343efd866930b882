mod common;

use std::time::Instant;

use common::gradient_cases;

#[test]
fn analytic_gradients_match_central_differences() {
    let start = Instant::now();
    let cases = gradient_cases(100, 2024);
    let mut worst = (0.0, String::new());
    for (i, case) in cases.iter().enumerate() {
        let err = case.check();
        eprintln!("case {i:3} {:<40} params {:4} rel err {err:.2e}", case.name, case.params.len());
        if err > worst.0 {
            worst = (err, case.name.clone());
        }
    }
    eprintln!("worst {:.2e} ({}) in {:?}", worst.0, worst.1, start.elapsed());
    assert!(worst.0 < 1e-5, "max relative error {:.3e} in {}", worst.0, worst.1);
}
