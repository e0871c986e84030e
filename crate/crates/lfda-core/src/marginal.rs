//! Marginal covariance estimation and the time-invariant eigenbasis.
//!
//! The pooled raw covariance of the demeaned curves is smoothed with the
//! diagonal removed (the diagonal carries the white-noise inflation), the
//! smoothed operator is truncated to its positive part, and the eigenbasis is
//! extracted with respect to the grid quadrature inner product.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{GridSpec, LFDataset};
use crate::error::{Error, Result};
use crate::numerics::{psd_reconstruct, weighted_eigh};
use crate::smoothing::{smooth_covariance_surface, SmoothedSurface};

/// Pooled cross-products of demeaned visits with per-cell pair counts.
#[derive(Debug, Clone)]
pub struct RawMarginalCovariance {
    pub matrix: DMatrix<f64>,
    pub counts: DMatrix<u32>,
}

/// Positive part of a smoothed covariance operator on the grid, with its
/// full weighted spectrum (negative eigenvalues zeroed).
#[derive(Debug, Clone)]
pub struct PsdCovariance {
    pub matrix: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
}

/// Marginal eigenbasis: `k` quadrature-orthonormal curves with nonincreasing
/// positive eigenvalues.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenBasis {
    pub grid: GridSpec,
    pub phi: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub pve_achieved: f64,
    pub total_variance: f64,
}

impl EigenBasis {
    pub fn k(&self) -> usize {
        self.phi.len()
    }
}

/// Estimated white-noise variance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WhiteNoiseVariance {
    pub sigma2: f64,
}

/// Raw pooled covariance of demeaned data. Entry `(r, r')` averages
/// `y_r * y_r'` over all visits where both cells are observed; `counts`
/// records the denominators (0 marks a never-jointly-observed pair).
pub fn pooled_raw_covariance(demeaned: &LFDataset) -> RawMarginalCovariance {
    let r = demeaned.grid().len();
    let mut sums = DMatrix::<f64>::zeros(r, r);
    let mut counts = DMatrix::<u32>::zeros(r, r);
    for (_, visit) in demeaned.visits() {
        let observed: Vec<usize> = (0..r).filter(|&i| visit.mask[i]).collect();
        for &a in &observed {
            let va = visit.values[a];
            for &b in &observed {
                sums[(a, b)] += va * visit.values[b];
                counts[(a, b)] += 1;
            }
        }
    }
    let mut matrix = DMatrix::<f64>::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            if counts[(i, j)] > 0 {
                matrix[(i, j)] = sums[(i, j)] / counts[(i, j)] as f64;
            }
        }
    }
    RawMarginalCovariance { matrix, counts }
}

/// Smooth the raw covariance with its diagonal removed, then truncate the
/// resulting operator to its positive part. Returns the smooth surface (used
/// by the white-noise estimator) and the PSD discretized operator.
pub fn smooth_and_truncate(
    raw: &RawMarginalCovariance,
    grid: &GridSpec,
    cov_dim: usize,
    lambda_grid: &[f64],
) -> Result<(SmoothedSurface, PsdCovariance)> {
    let r = grid.len();
    let points = grid.points();
    let mut triples = Vec::with_capacity(r * (r - 1));
    for i in 0..r {
        for j in 0..r {
            if i != j && raw.counts[(i, j)] > 0 {
                triples.push((points[i], points[j], raw.matrix[(i, j)]));
            }
        }
    }
    if triples.is_empty() {
        return Err(Error::domain("no off-diagonal covariance entries available"));
    }
    let surface = smooth_covariance_surface(&triples, cov_dim, lambda_grid)?;
    let smoothed = surface.eval_grid(points, points)?;
    let (mut values, vectors) = weighted_eigh(&smoothed, grid.weights());
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let matrix = psd_reconstruct(&values, &vectors);
    Ok((
        surface,
        PsdCovariance {
            matrix,
            eigenvalues: values,
            eigenvectors: vectors,
        },
    ))
}

/// Fix the sign of an eigenfunction: nonnegative quadrature integral, and if
/// the integral is numerically zero, a positive value at the first point of
/// maximal magnitude.
pub(crate) fn fix_sign(curve: &mut [f64], weights: &[f64]) {
    let integral: f64 = curve.iter().zip(weights).map(|(c, w)| c * w).sum();
    let flip = if integral > 1e-8 {
        false
    } else if integral < -1e-8 {
        true
    } else {
        let mut arg = 0;
        let mut best = -1.0;
        for (i, &v) in curve.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                arg = i;
            }
        }
        curve[arg] < 0.0
    };
    if flip {
        for v in curve.iter_mut() {
            *v = -*v;
        }
    }
}

/// Extract the leading eigenpairs covering the requested proportion of
/// variance explained: the smallest `K` whose cumulative eigenvalue fraction
/// exceeds `pve`.
pub fn eigenbasis(psd: &PsdCovariance, grid: &GridSpec, pve: f64) -> Result<EigenBasis> {
    if !(0.0 < pve && pve < 1.0) {
        return Err(Error::config(format!("pve must be in (0, 1), got {pve}")));
    }
    let total: f64 = psd.eigenvalues.iter().filter(|&&v| v > 0.0).sum();
    if total <= 0.0 {
        return Err(Error::domain("covariance operator has no variance"));
    }
    let mut k = 0;
    let mut cum = 0.0;
    for &v in &psd.eigenvalues {
        if v <= 0.0 {
            break;
        }
        cum += v;
        k += 1;
        if cum / total > pve {
            break;
        }
    }
    if cum / total <= pve {
        // All positive eigenvalues together explain everything.
        debug_assert!((cum - total).abs() < 1e-9 * total);
    }
    let mut phi = Vec::with_capacity(k);
    for col in 0..k {
        let mut curve: Vec<f64> = (0..grid.len()).map(|r| psd.eigenvectors[(r, col)]).collect();
        fix_sign(&mut curve, grid.weights());
        phi.push(curve);
    }
    Ok(EigenBasis {
        grid: grid.clone(),
        phi,
        lambda: psd.eigenvalues[..k].to_vec(),
        pve_achieved: cum / total,
        total_variance: total,
    })
}

/// White-noise variance from the diagonal inflation of the raw covariance:
/// the average gap between the raw diagonal and the smoothed PSD diagonal,
/// floored at zero. `trim` removes that fraction of the grid from each
/// boundary before averaging.
pub fn estimate_white_noise(
    raw: &RawMarginalCovariance,
    psd: &PsdCovariance,
    grid: &GridSpec,
    trim: f64,
) -> WhiteNoiseVariance {
    let r = grid.len();
    let lo = ((r as f64) * trim).floor() as usize;
    let hi = r - lo;
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in lo..hi {
        if raw.counts[(i, i)] > 0 {
            acc += raw.matrix[(i, i)] - psd.matrix[(i, i)];
            n += 1;
        }
    }
    let sigma2 = if n > 0 { (acc / n as f64).max(0.0) } else { 0.0 };
    WhiteNoiseVariance { sigma2 }
}
