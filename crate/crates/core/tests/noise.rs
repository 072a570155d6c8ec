use fedlab::numcore::{GradVector, Layout};
use fedlab::privacy::{add_gaussian, dp_perturb_examples, NoisePolicy, PrivacyLedger, DEFAULT_DELTA};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn zeros(dim: usize) -> GradVector {
    GradVector::zeros(Arc::new(Layout::for_widths(&[dim - 1, 1])))
}

fn std_of(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (mean, (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[test]
fn gaussian_noise_has_requested_variance() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let out = add_gaussian(&zeros(200_000), 0.25, &mut r).unwrap();
    let (mean, std) = std_of(out.values());
    assert!(mean.abs() < 0.005);
    assert!((std - 0.5).abs() < 0.005, "std {std}");
}

#[test]
fn per_example_noise_averages_down() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let batch = vec![zeros(50_000); 4];
    let policy = NoisePolicy::fixed_dp(1.5, 2.0);
    let (mean, record) = dp_perturb_examples(&batch, &policy, 2.0, &mut r).unwrap();
    assert_eq!(record.value, 1.5);
    let (_, std) = std_of(mean.values());
    let expected = 2.0 * 1.5 / 2.0;
    assert!((std - expected).abs() < 0.02 * expected, "std {std}");
}

#[test]
fn unit_noise_epsilon_matches_frozen_grid_value() {
    let mut l = PrivacyLedger::new(DEFAULT_DELTA).unwrap();
    l.step(1.0).unwrap();
    // Order 6 minimizes 6/2 + ln(1e5)/5 on the integer grid.
    assert!((l.epsilon() - 5.302585092994046).abs() < 1e-12);
    l.step(1.0).unwrap();
    let brute = (2..=64)
        .map(f64::from)
        .chain(std::iter::once(1.5))
        .map(|a| a + (1e5f64).ln() / (a - 1.0))
        .fold(f64::INFINITY, f64::min);
    assert!((l.epsilon() - brute).abs() < 1e-12);
}
