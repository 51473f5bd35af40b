mod common;

use common::{gradient_check, GradientCheck};
use p2preg::losses::LossConfig;
use p2preg::train::LossWeights;

const SEEDS: std::ops::Range<u64> = 0..10;
const TOLERANCE: f64 = 1e-3;

fn check(name: &str, weights: LossWeights) {
    let mut worst = 0.0f64;
    for seed in SEEDS {
        let GradientCheck {
            max_relative_error,
            checked,
            refined,
        } = gradient_check(seed, weights, 12, 4);
        println!("{name} seed {seed}: {checked} checks ({refined} refined), max relative error {max_relative_error:.3e}");
        worst = worst.max(max_relative_error);
    }
    assert!(worst < TOLERANCE, "{name}: max relative error {worst:.3e}");
}

#[test]
fn param_loss_gradient() {
    check("L_p", LossWeights::PARAM);
}

#[test]
fn sensitivity_loss_gradient() {
    check("L_s", LossWeights::SENSITIVITY);
}

#[test]
fn dropout_loss_gradient() {
    check("L_d", LossWeights::DROPOUT);
}

#[test]
fn total_loss_gradient() {
    check("L_total", LossWeights::total(&LossConfig::default()));
}
