//! Shared numerical helpers: weighted eigendecomposition, guarded SPD solves,
//! interpolation, quantiles, and a small Nelder-Mead optimizer.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigendecomposition of a covariance matrix `c` with respect to the quadrature
/// inner product `<f, g>_w = sum_r f_r g_r w_r`.
///
/// Solves the symmetric problem `W^{1/2} C W^{1/2} u = a u` and maps the
/// eigenvectors back via `phi = W^{-1/2} u`, so the returned columns satisfy
/// `<phi_k, phi_k'>_w = delta_{kk'}`. Eigenvalues are returned in nonincreasing
/// order; they approximate the L2 eigenvalues of the integral operator.
pub fn weighted_eigh(c: &DMatrix<f64>, weights: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let n = weights.len();
    assert_eq!(c.nrows(), n);
    assert_eq!(c.ncols(), n);
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = sqrt_w[i] * c[(i, j)] * sqrt_w[j];
        }
    }
    // Enforce exact symmetry before the solver sees it.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let eig = a.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut values = Vec::with_capacity(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (out_col, &idx) in order.iter().enumerate() {
        values.push(eig.eigenvalues[idx]);
        for r in 0..n {
            vectors[(r, out_col)] = eig.eigenvectors[(r, idx)] / sqrt_w[r];
        }
    }
    (values, vectors)
}

/// Reconstruct `sum_k max(values[k], 0) * phi_k phi_k^T` from a weighted
/// eigendecomposition, i.e. the positive part of the operator. The result is
/// exactly symmetric: the upper triangle is computed and mirrored.
pub fn psd_reconstruct(values: &[f64], vectors: &DMatrix<f64>) -> DMatrix<f64> {
    let n = vectors.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (k, &v) in values.iter().enumerate() {
        if v <= 0.0 {
            continue;
        }
        let col = vectors.column(k);
        for i in 0..n {
            let vi = v * col[i];
            for j in i..n {
                out[(i, j)] += vi * col[j];
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            out[(j, i)] = out[(i, j)];
        }
    }
    out
}

/// Solve `A x = b` for symmetric positive-definite `A`, escalating a ridge
/// jitter of `1e-10 * trace(A)/dim` when the Cholesky factorization fails.
pub fn solve_spd_with_jitter(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    let base = 1e-10 * a.trace().abs().max(1e-300) / n as f64;
    let mut jitter = base;
    for _ in 0..12 {
        let mut aj = a.clone();
        for i in 0..n {
            aj[(i, i)] += jitter;
        }
        if let Some(chol) = aj.cholesky() {
            return Ok(chol.solve(b));
        }
        jitter *= 10.0;
    }
    Err(Error::Singular(format!(
        "{n}x{n} system not positive definite even after ridge jitter"
    )))
}

/// Piecewise-linear interpolation of a curve sampled on an increasing grid.
/// `x` must lie within `[grid[0], grid[last]]`; endpoints are handled exactly.
pub fn interp_linear(grid: &[f64], values: &[f64], x: f64) -> f64 {
    debug_assert_eq!(grid.len(), values.len());
    let n = grid.len();
    if x <= grid[0] {
        return values[0];
    }
    if x >= grid[n - 1] {
        return values[n - 1];
    }
    let mut hi = match grid.binary_search_by(|g| g.partial_cmp(&x).unwrap()) {
        Ok(idx) => return values[idx],
        Err(idx) => idx,
    };
    if hi == 0 {
        hi = 1;
    }
    let lo = hi - 1;
    let t = (x - grid[lo]) / (grid[hi] - grid[lo]);
    values[lo] + t * (values[hi] - values[lo])
}

/// Empirical quantile with linear interpolation between order statistics
/// (the common "type 7" definition). `p` is clamped to [0, 1].
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0);
    let p = p.clamp(0.0, 1.0);
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Result of a Nelder-Mead minimization.
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize `f` from `start` with the standard Nelder-Mead simplex scheme.
/// Convergence is declared when the spread of simplex function values falls
/// below `tol * (1 + |f_best|)`.
pub fn nelder_mead<F>(
    f: F,
    start: &[f64],
    initial_step: f64,
    tol: f64,
    max_iter: usize,
) -> NelderMeadResult
where
    F: Fn(&[f64]) -> f64,
{
    let dim = start.len();
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((start.to_vec(), eval(start)));
    for d in 0..dim {
        let mut x = start.to_vec();
        x[d] += initial_step;
        let fx = eval(&x);
        simplex.push((x, fx));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let f_best = simplex[0].1;
        let f_worst = simplex[dim].1;
        if f_worst.is_finite() && (f_worst - f_best).abs() <= tol * (1.0 + f_best.abs()) {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; dim];
        for (x, _) in simplex.iter().take(dim) {
            for d in 0..dim {
                centroid[d] += x[d] / dim as f64;
            }
        }

        let worst = simplex[dim].clone();
        let reflected: Vec<f64> = (0..dim)
            .map(|d| centroid[d] + alpha * (centroid[d] - worst.0[d]))
            .collect();
        let f_reflected = eval(&reflected);

        if f_reflected < simplex[0].1 {
            let expanded: Vec<f64> = (0..dim)
                .map(|d| centroid[d] + gamma * (reflected[d] - centroid[d]))
                .collect();
            let f_expanded = eval(&expanded);
            simplex[dim] = if f_expanded < f_reflected {
                (expanded, f_expanded)
            } else {
                (reflected, f_reflected)
            };
            continue;
        }
        if f_reflected < simplex[dim - 1].1 {
            simplex[dim] = (reflected, f_reflected);
            continue;
        }
        let contracted: Vec<f64> = (0..dim)
            .map(|d| centroid[d] + rho * (worst.0[d] - centroid[d]))
            .collect();
        let f_contracted = eval(&contracted);
        if f_contracted < worst.1 {
            simplex[dim] = (contracted, f_contracted);
            continue;
        }
        // Shrink toward the best vertex.
        let best = simplex[0].0.clone();
        for entry in simplex.iter_mut().skip(1) {
            for d in 0..dim {
                entry.0[d] = best[d] + sigma * (entry.0[d] - best[d]);
            }
            entry.1 = eval(&entry.0);
        }
    }

    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    NelderMeadResult {
        x: simplex[0].0.clone(),
        fx: simplex[0].1,
        iterations,
        converged,
    }
}

/// Derive an independent child seed from a base seed and a stream index
/// (SplitMix64 finalizer). Used to give replicates and bootstrap draws their
/// own deterministic RNG streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ (stream.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trapezoid-rule integral of `values` sampled on `grid`.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    debug_assert_eq!(grid.len(), values.len());
    let mut acc = 0.0;
    for i in 1..grid.len() {
        acc += 0.5 * (values[i] + values[i - 1]) * (grid[i] - grid[i - 1]);
    }
    acc
}
