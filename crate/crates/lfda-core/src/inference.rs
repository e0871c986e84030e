//! Residual-bootstrap test of a null slope in the varying-coefficient mean,
//! plus pointwise bootstrap confidence bands for the slope curve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LFDataset, Subject};
use crate::error::{Error, Result};
use crate::mean::{fit_varying_coefficient_mean, MeanSurface};
use crate::numerics::{derive_seed, quantile};
use crate::smoothing::default_lambda_grid;

/// Fraction of failed bootstrap refits tolerated before the run errors out.
const MAX_DROP_FRACTION: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct InferenceOptions {
    pub d_s: usize,
    pub lambda_grid: Vec<f64>,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            d_s: 10,
            lambda_grid: default_lambda_grid(),
        }
    }
}

/// Outcome of the bootstrap slope test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeTestResult {
    pub q_obs: f64,
    pub q_null: Vec<f64>,
    pub p_value: f64,
    /// Number of successful bootstrap replicates (the p-value denominator).
    pub b: usize,
    pub dropped_replicates: usize,
}

/// Pointwise bootstrap confidence band for the slope curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointwiseBand {
    pub s_grid: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
}

fn fitted_slope(data: &LFDataset, opts: &InferenceOptions) -> Result<Vec<f64>> {
    let mean = fit_varying_coefficient_mean(data, opts.d_s, &opts.lambda_grid)?;
    match mean {
        MeanSurface::VaryingCoefficient { beta_t, .. } => Ok(beta_t),
        _ => unreachable!("varying-coefficient fit returns its own variant"),
    }
}

fn integrated_square(data: &LFDataset, curve: &[f64]) -> f64 {
    let sq: Vec<f64> = curve.iter().map(|b| b * b).collect();
    data.grid().integrate(&sq)
}

/// Observed test statistic `Q = integral beta_hat_T(s)^2 ds`.
pub fn slope_statistic(data: &LFDataset, opts: &InferenceOptions) -> Result<f64> {
    let beta = fitted_slope(data, opts)?;
    Ok(integrated_square(data, &beta))
}

/// Resample subjects with replacement, keeping each subject's visits
/// together. Ids are renamed positionally to keep them unique.
fn resample_subjects(data: &LFDataset, rng: &mut ChaCha8Rng) -> Result<LFDataset> {
    let n = data.n_subjects();
    let subjects: Vec<Subject> = (0..n)
        .map(|slot| {
            let pick = rng.random_range(0..n);
            let original = &data.subjects()[pick];
            Subject {
                id: format!("{slot}:{}", original.id),
                visits: original.visits.clone(),
            }
        })
        .collect();
    LFDataset::new(data.grid().clone(), subjects)
}

/// Subtract the fitted slope effect from every curve, enforcing the null
/// `beta_T = 0` while keeping everything else.
fn null_enforced(data: &LFDataset, slope: &[f64]) -> Result<LFDataset> {
    let grid = data.grid().clone();
    let subjects = data
        .subjects()
        .iter()
        .map(|subject| Subject {
            id: subject.id.clone(),
            visits: subject
                .visits
                .iter()
                .map(|visit| {
                    let mut values = visit.values.clone();
                    for (r, value) in values.iter_mut().enumerate() {
                        if visit.mask[r] {
                            *value -= slope[r] * visit.t;
                        }
                    }
                    crate::dataset::Visit {
                        t: visit.t,
                        values,
                        mask: visit.mask.clone(),
                    }
                })
                .collect(),
        })
        .collect();
    LFDataset::new(grid, subjects)
}

/// Bootstrap test of `H0: beta_T = 0`. The null sample is built once by
/// removing the fitted slope effect; each replicate resamples subjects with
/// replacement and refits the varying-coefficient mean. Deterministic given
/// the seed; failed refits are dropped (more than 5% dropped is an error).
pub fn bootstrap_slope_test(
    data: &LFDataset,
    b: usize,
    seed: u64,
    opts: &InferenceOptions,
) -> Result<SlopeTestResult> {
    if b < 1 {
        return Err(Error::config("bootstrap needs at least one replicate"));
    }
    let slope = fitted_slope(data, opts)?;
    let q_obs = integrated_square(data, &slope);
    let null_data = null_enforced(data, &slope)?;

    let outcomes: Vec<std::result::Result<f64, String>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, rep as u64));
            let resampled = resample_subjects(&null_data, &mut rng).map_err(|e| e.to_string())?;
            let beta = fitted_slope(&resampled, opts).map_err(|e| e.to_string())?;
            Ok(integrated_square(&resampled, &beta))
        })
        .collect();

    let mut q_null = Vec::with_capacity(b);
    let mut dropped = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok(q) => q_null.push(q),
            Err(_) => dropped += 1,
        }
    }
    if (dropped as f64) > MAX_DROP_FRACTION * b as f64 {
        return Err(Error::fit(
            "bootstrap",
            format!("{dropped} of {b} bootstrap replicates failed"),
        ));
    }
    if q_null.is_empty() {
        return Err(Error::fit("bootstrap", "no successful bootstrap replicates"));
    }
    let exceed = q_null.iter().filter(|&&q| q > q_obs).count();
    let p_value = exceed as f64 / q_null.len() as f64;
    Ok(SlopeTestResult {
        q_obs,
        p_value,
        b: q_null.len(),
        dropped_replicates: dropped,
        q_null,
    })
}

/// Pointwise bootstrap confidence band for the slope curve at the given
/// level: per-grid-point empirical quantiles of the resampled estimates.
pub fn bootstrap_slope_band(
    data: &LFDataset,
    b: usize,
    level: f64,
    seed: u64,
    opts: &InferenceOptions,
) -> Result<PointwiseBand> {
    if b < 20 {
        return Err(Error::config("band estimation needs at least 20 replicates"));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::config("level must be in (0, 1)"));
    }
    let outcomes: Vec<std::result::Result<Vec<f64>, String>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, rep as u64));
            let resampled = resample_subjects(data, &mut rng).map_err(|e| e.to_string())?;
            fitted_slope(&resampled, opts).map_err(|e| e.to_string())
        })
        .collect();

    let mut curves = Vec::with_capacity(b);
    let mut dropped = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok(c) => curves.push(c),
            Err(_) => dropped += 1,
        }
    }
    if (dropped as f64) > MAX_DROP_FRACTION * b as f64 || curves.is_empty() {
        return Err(Error::fit(
            "bootstrap",
            format!("{dropped} of {b} bootstrap replicates failed"),
        ));
    }

    let r = data.grid().len();
    let alpha = (1.0 - level) / 2.0;
    let mut lower = Vec::with_capacity(r);
    let mut upper = Vec::with_capacity(r);
    for point in 0..r {
        let mut values: Vec<f64> = curves.iter().map(|c| c[point]).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        lower.push(quantile(&values, alpha));
        upper.push(quantile(&values, 1.0 - alpha));
    }
    Ok(PointwiseBand {
        s_grid: data.grid().points().to_vec(),
        lower,
        upper,
        level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{GridSpec, Visit};
    use approx::assert_relative_eq;

    fn linear_slope_data(n: usize, beta: impl Fn(f64) -> f64, noise: f64) -> LFDataset {
        let grid = GridSpec::equispaced(41).unwrap();
        let mut state = 0xABCDEF12345u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let subjects: Vec<Subject> = (0..n)
            .map(|i| Subject {
                id: format!("{i:03}"),
                visits: (0..4)
                    .map(|j| {
                        let t = j as f64 / 3.0;
                        let values = grid
                            .points()
                            .iter()
                            .map(|&s| 1.0 + s + beta(s) * t + noise * next())
                            .collect();
                        Visit::dense(t, values).unwrap()
                    })
                    .collect(),
            })
            .collect();
        LFDataset::new(grid, subjects).unwrap()
    }

    #[test]
    fn statistic_for_known_slopes() {
        let opts = InferenceOptions::default();
        let zero = linear_slope_data(30, |_| 0.0, 0.0);
        assert!(slope_statistic(&zero, &opts).unwrap() < 1e-16);

        // Given a constant fitted slope the statistic is exactly c^2.
        let grid_only = linear_slope_data(2, |_| 0.0, 0.0);
        let constant_curve = vec![2.0; grid_only.grid().len()];
        assert_relative_eq!(
            integrated_square(&grid_only, &constant_curve),
            4.0,
            epsilon = 1e-10
        );
        // End-to-end, the refit constant slope carries solver round-off.
        let constant = linear_slope_data(30, |_| 2.0, 0.0);
        assert_relative_eq!(slope_statistic(&constant, &opts).unwrap(), 4.0, epsilon = 5e-9);

        let linear = linear_slope_data(30, |s| s, 0.0);
        let q = slope_statistic(&linear, &opts).unwrap();
        assert!((q - 1.0 / 3.0).abs() < 1e-3, "Q = {q}");
    }

    #[test]
    fn statistic_invariant_to_t_constant_shift() {
        let opts = InferenceOptions::default();
        let base = linear_slope_data(25, |s| 0.5 + s, 0.05);
        let q1 = slope_statistic(&base, &opts).unwrap();

        let grid = base.grid().clone();
        let shifted_subjects: Vec<Subject> = base
            .subjects()
            .iter()
            .map(|subject| Subject {
                id: subject.id.clone(),
                visits: subject
                    .visits
                    .iter()
                    .map(|visit| {
                        let values = visit
                            .values
                            .iter()
                            .zip(grid.points())
                            .map(|(v, &s)| v + (3.0 * std::f64::consts::PI * s).cos())
                            .collect();
                        Visit::dense(visit.t, values).unwrap()
                    })
                    .collect(),
            })
            .collect();
        let shifted = LFDataset::new(grid, shifted_subjects).unwrap();
        let q2 = slope_statistic(&shifted, &opts).unwrap();
        assert_relative_eq!(q1, q2, epsilon = 1e-8);
    }

    #[test]
    fn test_determinism_and_p_value_grid() {
        let opts = InferenceOptions::default();
        let data = linear_slope_data(20, |_| 0.0, 0.3);
        let a = bootstrap_slope_test(&data, 25, 7, &opts).unwrap();
        let c = bootstrap_slope_test(&data, 25, 7, &opts).unwrap();
        assert_eq!(a.p_value.to_bits(), c.p_value.to_bits());
        assert_eq!(a.b, 25);
        assert_eq!(a.dropped_replicates, 0);
        let steps = (a.p_value * a.b as f64).round();
        assert_relative_eq!(a.p_value, steps / a.b as f64, epsilon = 1e-12);
    }

    #[test]
    fn identical_subjects_give_zero_width_band() {
        let grid = GridSpec::equispaced(21).unwrap();
        let subjects: Vec<Subject> = (0..10)
            .map(|i| Subject {
                id: format!("{i}"),
                visits: (0..3)
                    .map(|j| {
                        let t = j as f64 / 2.0;
                        let values = grid.points().iter().map(|&s| s + 2.0 * s * t).collect();
                        Visit::dense(t, values).unwrap()
                    })
                    .collect(),
            })
            .collect();
        let data = LFDataset::new(grid, subjects).unwrap();
        let band = bootstrap_slope_band(&data, 20, 0.95, 3, &InferenceOptions::default()).unwrap();
        for (lo, hi) in band.lower.iter().zip(band.upper.iter()) {
            assert_relative_eq!(lo, hi, epsilon = 1e-12);
        }
    }

    #[test]
    fn band_nesting_in_level() {
        let data = linear_slope_data(20, |s| s, 0.4);
        let opts = InferenceOptions::default();
        let narrow = bootstrap_slope_band(&data, 40, 0.90, 11, &opts).unwrap();
        let wide = bootstrap_slope_band(&data, 40, 0.95, 11, &opts).unwrap();
        for i in 0..narrow.lower.len() {
            assert!(wide.lower[i] <= narrow.lower[i] + 1e-12);
            assert!(narrow.upper[i] <= wide.upper[i] + 1e-12);
        }
        assert!(bootstrap_slope_band(&data, 10, 0.95, 1, &opts).is_err());
    }
}
