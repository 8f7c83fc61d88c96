use hypermixer::trainer::{expected_validation_performance, relative_improvement};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean of the best of `k` draws with replacement, by simulation.
fn monte_carlo(scores: &[f64], k: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let best = (0..k)
            .map(|_| scores[rng.gen_range(0..scores.len())])
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    total / samples as f64
}

#[test]
fn matches_resampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..3 {
        let scores: Vec<f64> = (0..12).map(|_| rng.gen_range(0.5..0.9)).collect();
        for k in [2, 5] {
            let exact = expected_validation_performance(&scores, k).unwrap();
            let sim = monte_carlo(&scores, k, 200_000, trial);
            assert!((exact - sim).abs() < 0.002, "k={k}: {exact} vs {sim}");
        }
    }
}

#[test]
fn k_of_one_is_the_mean_and_large_k_the_max() {
    let s = [0.3, 0.9, 0.6, 0.6];
    assert!((expected_validation_performance(&s, 1).unwrap() - 0.6).abs() < 1e-12);
    assert!((expected_validation_performance(&s, 500).unwrap() - 0.9).abs() < 1e-6);
    assert!(expected_validation_performance(&[], 1).is_err());
    assert!(expected_validation_performance(&s, 0).is_err());
}

#[test]
fn relative_improvement_is_a_fraction_of_the_baseline() {
    assert!((relative_improvement(0.88, 0.8).unwrap() - 0.1).abs() < 1e-12);
    assert!(relative_improvement(0.5, 0.0).is_err());
}

proptest! {
    #[test]
    fn monotone_in_k(scores in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let mut prev = f64::NEG_INFINITY;
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for k in 1..30 {
            let v = expected_validation_performance(&scores, k).unwrap();
            prop_assert!(v >= prev - 1e-12);
            prop_assert!(v <= max + 1e-12);
            prev = v;
        }
    }
}
