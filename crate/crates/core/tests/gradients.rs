mod common;

use common::fd::check_fixture;

#[test]
fn color_gradients_match_central_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let alpha = [0.8, 1.0, 0.0, 0.5][seed as usize % 4];
        worst = worst.max(check_fixture(seed, alpha));
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}
