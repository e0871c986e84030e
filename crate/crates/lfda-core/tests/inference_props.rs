//! Statistical behavior of the bootstrap slope machinery: power under a
//! strong signal and pointwise band coverage under the null. The test-level
//! check lives in the acceptance suite.

use lfda_core::dataset::{GridSpec, LFDataset, Subject, Visit};
use lfda_core::inference::{bootstrap_slope_band, bootstrap_slope_test, InferenceOptions};
use lfda_core::numerics::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::f64::consts::PI;

/// Longitudinal curves with subject effects and slope `beta(s) * t`.
fn generate(n: usize, beta: impl Fn(f64) -> f64, seed: u64) -> LFDataset {
    let grid = GridSpec::equispaced(41).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects: Vec<Subject> = (0..n)
        .map(|i| {
            let subject_shift: f64 = StandardNormal.sample(&mut rng);
            let m = rng.random_range(3..=5);
            let visits = (0..m)
                .map(|_| {
                    let t = rng.random_range(0..21) as f64 / 20.0;
                    let values: Vec<f64> = grid
                        .points()
                        .iter()
                        .map(|&s| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            (2.0 * PI * s).sin()
                                + beta(s) * t
                                + 0.8 * subject_shift
                                + 0.5 * e
                        })
                        .collect();
                    Visit::dense(t, values).unwrap()
                })
                .collect();
            Subject {
                id: format!("{i:03}"),
                visits,
            }
        })
        .collect();
    LFDataset::new(grid, subjects).unwrap()
}

#[test]
fn strong_signal_is_detected() {
    // beta(s) = 2s at n = 200: the test must reject at 5% in nearly every
    // trial (50 trials, B = 200).
    let opts = InferenceOptions::default();
    let rejections: usize = (0..50u64)
        .into_par_iter()
        .map(|trial| {
            let data = generate(200, |s| 2.0 * s, derive_seed(5000, trial));
            let result = bootstrap_slope_test(&data, 200, derive_seed(6000, trial), &opts).unwrap();
            usize::from(result.p_value < 0.05)
        })
        .sum();
    assert!(rejections >= 48, "rejected in only {rejections}/50 trials");
}

#[test]
fn null_band_covers_zero() {
    // Under beta = 0 the band should contain zero at roughly the nominal
    // fraction of grid points, averaged over trials.
    let opts = InferenceOptions::default();
    let coverages: Vec<f64> = (0..50u64)
        .into_par_iter()
        .map(|trial| {
            let data = generate(100, |_| 0.0, derive_seed(7000, trial));
            let band =
                bootstrap_slope_band(&data, 100, 0.95, derive_seed(7500, trial), &opts).unwrap();
            let covered = band
                .lower
                .iter()
                .zip(band.upper.iter())
                .filter(|(lo, hi)| **lo <= 0.0 && 0.0 <= **hi)
                .count();
            covered as f64 / band.lower.len() as f64
        })
        .collect();
    let mean_coverage = coverages.iter().sum::<f64>() / coverages.len() as f64;
    assert!(
        mean_coverage >= 0.90,
        "zero covered at only {mean_coverage:.3} of grid points"
    );
}
