//! Penalized least-squares smoothers with GCV smoothing-parameter selection.
//!
//! One backend serves every surface in the pipeline: the bivariate mean, the
//! marginal covariance, and the per-component longitudinal covariances. The
//! univariate variant handles coefficient curves and diagonal smooths.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splines::{curvature_penalty, BSplineBasis, MAX_DEGREE};

/// Observation for a bivariate fit: `(x1, x2, value, weight)`.
pub type Obs2 = (f64, f64, f64, f64);
/// Observation for a univariate fit: `(x, value, weight)`.
pub type Obs1 = (f64, f64, f64);

/// Absolute floor of the GCV tie window (covers exact-fit degeneracies).
const GCV_TIE_FLOOR: f64 = 1e-9;

/// GCV scores within one standard error of the minimum count as tied, and
/// ties go to the largest penalty. The sampling standard error of a GCV
/// difference between two fits whose effective dimensions differ by `d_edf`
/// is roughly `gcv * sqrt(2 d_edf) / n`.
fn gcv_tie_window(gcv_min: f64, edf_min: f64, edf: f64, n_obs: usize) -> f64 {
    gcv_min * (2.0 * (edf - edf_min).abs()).sqrt() / n_obs as f64
        + GCV_TIE_FLOOR * (1.0 + gcv_min.abs())
}

/// Default smoothing-parameter grid: 11 log-spaced values in [1e-6, 1e3].
pub fn default_lambda_grid() -> Vec<f64> {
    (0..11).map(|k| 10f64.powf(-6.0 + 0.9 * k as f64)).collect()
}

/// Cartesian product of [`default_lambda_grid`] with itself, for anisotropic
/// bivariate fits.
pub fn default_lambda_pairs() -> Vec<(f64, f64)> {
    let grid = default_lambda_grid();
    let mut pairs = Vec::with_capacity(grid.len() * grid.len());
    for &l1 in &grid {
        for &l2 in &grid {
            pairs.push((l1, l2));
        }
    }
    pairs
}

/// A fitted penalized tensor-product surface.
#[derive(Debug, Clone)]
pub struct Penalized2DFit {
    pub basis1: BSplineBasis,
    pub basis2: BSplineBasis,
    pub coeffs: DVector<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gcv: f64,
    pub edf: f64,
    pub rss: f64,
    pub n_obs: usize,
}

impl Penalized2DFit {
    pub fn surface(&self, symmetric: bool) -> SmoothedSurface {
        SmoothedSurface {
            basis1: self.basis1.clone(),
            basis2: self.basis2.clone(),
            coeffs: self.coeffs.iter().copied().collect(),
            symmetric,
        }
    }
}

/// A fitted penalized univariate curve.
#[derive(Debug, Clone)]
pub struct Penalized1DFit {
    pub basis: BSplineBasis,
    pub coeffs: DVector<f64>,
    pub lambda: f64,
    pub gcv: f64,
    pub edf: f64,
    pub rss: f64,
    pub n_obs: usize,
}

impl Penalized1DFit {
    pub fn eval(&self, x: f64) -> Result<f64> {
        let mut buf = [0.0_f64; MAX_DEGREE + 1];
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::domain(format!("point {x} outside [0, 1]")));
        }
        let start = self.basis.eval_nonzero(x, &mut buf);
        let mut acc = 0.0;
        for (offset, &b) in buf[..=self.basis.degree()].iter().enumerate() {
            acc += b * self.coeffs[start + offset];
        }
        Ok(acc)
    }
}

/// Evaluable tensor-product spline surface; `symmetric` surfaces return
/// `(f(a,b) + f(b,a)) / 2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothedSurface {
    basis1: BSplineBasis,
    basis2: BSplineBasis,
    coeffs: Vec<f64>,
    symmetric: bool,
}

impl SmoothedSurface {
    pub fn eval(&self, x1: f64, x2: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x1) || !(0.0..=1.0).contains(&x2) {
            return Err(Error::domain(format!("point ({x1}, {x2}) outside [0, 1]^2")));
        }
        let raw = self.eval_raw(x1, x2);
        Ok(if self.symmetric {
            0.5 * (raw + self.eval_raw(x2, x1))
        } else {
            raw
        })
    }

    fn eval_raw(&self, x1: f64, x2: f64) -> f64 {
        let d2 = self.basis2.dim();
        let mut b1 = [0.0_f64; MAX_DEGREE + 1];
        let mut b2 = [0.0_f64; MAX_DEGREE + 1];
        let s1 = self.basis1.eval_nonzero(x1, &mut b1);
        let s2 = self.basis2.eval_nonzero(x2, &mut b2);
        let mut acc = 0.0;
        for i in 0..=self.basis1.degree() {
            let vi = b1[i];
            if vi == 0.0 {
                continue;
            }
            let row = (s1 + i) * d2 + s2;
            for j in 0..=self.basis2.degree() {
                acc += vi * b2[j] * self.coeffs[row + j];
            }
        }
        acc
    }

    /// Evaluate on the product of two grids; rows index `g1`.
    pub fn eval_grid(&self, g1: &[f64], g2: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(g1.len(), g2.len());
        for (i, &a) in g1.iter().enumerate() {
            for (j, &b) in g2.iter().enumerate() {
                out[(i, j)] = self.eval(a, b)?;
            }
        }
        Ok(out)
    }
}

/// Precomputed normal equations `X'WX`, `X'Wy`, `y'Wy` for a fixed design,
/// reused across the smoothing-parameter grid.
struct NormalEq {
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    n_obs: usize,
}

struct SolvedFit {
    coeffs: DVector<f64>,
    rss: f64,
    edf: f64,
    gcv: f64,
}

impl NormalEq {
    fn new_2d(obs: &[Obs2], basis1: &BSplineBasis, basis2: &BSplineBasis) -> Result<Self> {
        let (d1, d2) = (basis1.dim(), basis2.dim());
        let p = d1 * d2;
        let (p1, p2) = (basis1.degree() + 1, basis2.degree() + 1);
        let mut xtx = DMatrix::zeros(p, p);
        let mut xty = DVector::zeros(p);
        let mut yty = 0.0;
        let mut n_obs = 0usize;
        let mut b1 = [0.0_f64; MAX_DEGREE + 1];
        let mut b2 = [0.0_f64; MAX_DEGREE + 1];
        let mut idx = [0usize; (MAX_DEGREE + 1) * (MAX_DEGREE + 1)];
        let mut val = [0.0_f64; (MAX_DEGREE + 1) * (MAX_DEGREE + 1)];
        for &(x1, x2, y, w) in obs {
            if w < 0.0 || !w.is_finite() {
                return Err(Error::domain(format!("invalid weight {w}")));
            }
            if !y.is_finite() {
                return Err(Error::domain(format!("non-finite value {y}")));
            }
            if !(0.0..=1.0).contains(&x1) || !(0.0..=1.0).contains(&x2) {
                return Err(Error::domain(format!("point ({x1}, {x2}) outside [0, 1]^2")));
            }
            if w == 0.0 {
                continue;
            }
            n_obs += 1;
            let s1 = basis1.eval_nonzero(x1, &mut b1);
            let s2 = basis2.eval_nonzero(x2, &mut b2);
            let mut nnz = 0;
            for i in 0..p1 {
                if b1[i] == 0.0 {
                    continue;
                }
                for j in 0..p2 {
                    if b2[j] == 0.0 {
                        continue;
                    }
                    idx[nnz] = (s1 + i) * d2 + (s2 + j);
                    val[nnz] = b1[i] * b2[j];
                    nnz += 1;
                }
            }
            for a in 0..nnz {
                let wa = w * val[a];
                xty[idx[a]] += wa * y;
                for b in 0..nnz {
                    xtx[(idx[a], idx[b])] += wa * val[b];
                }
            }
            yty += w * y * y;
        }
        if n_obs == 0 {
            return Err(Error::domain("all observation weights are zero"));
        }
        Ok(Self { xtx, xty, yty, n_obs })
    }

    fn new_1d(obs: &[Obs1], basis: &BSplineBasis) -> Result<Self> {
        let p = basis.dim();
        let deg = basis.degree();
        let mut xtx = DMatrix::zeros(p, p);
        let mut xty = DVector::zeros(p);
        let mut yty = 0.0;
        let mut n_obs = 0usize;
        let mut b = [0.0_f64; MAX_DEGREE + 1];
        for &(x, y, w) in obs {
            if w < 0.0 || !w.is_finite() {
                return Err(Error::domain(format!("invalid weight {w}")));
            }
            if !y.is_finite() {
                return Err(Error::domain(format!("non-finite value {y}")));
            }
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::domain(format!("point {x} outside [0, 1]")));
            }
            if w == 0.0 {
                continue;
            }
            n_obs += 1;
            let s = basis.eval_nonzero(x, &mut b);
            for i in 0..=deg {
                let wi = w * b[i];
                xty[s + i] += wi * y;
                for j in 0..=deg {
                    xtx[(s + i, s + j)] += wi * b[j];
                }
            }
            yty += w * y * y;
        }
        if n_obs == 0 {
            return Err(Error::domain("all observation weights are zero"));
        }
        Ok(Self { xtx, xty, yty, n_obs })
    }

    /// Solve the penalized normal equations for a given total penalty.
    fn solve(&self, penalty: &DMatrix<f64>) -> Result<SolvedFit> {
        let p = self.xtx.nrows();
        // A penalty more than ~1e9 times the data scale is numerically
        // indistinguishable from the limiting null-space fit but destroys
        // the conditioning of the solve; clamp it at that ratio.
        let data_scale = self.xtx.trace().abs().max(1e-300);
        let pen_scale = penalty.trace().abs();
        let a = if pen_scale > 1e9 * data_scale {
            &self.xtx + penalty * (1e9 * data_scale / pen_scale)
        } else {
            &self.xtx + penalty
        };
        let mut jittered = false;
        let chol = match a.clone().cholesky() {
            Some(c) => c,
            None => {
                jittered = true;
                let mut jitter = 1e-10 * a.trace().abs().max(1e-300) / p as f64;
                let mut found = None;
                for _ in 0..12 {
                    let mut aj = a.clone();
                    for i in 0..p {
                        aj[(i, i)] += jitter;
                    }
                    if let Some(c) = aj.cholesky() {
                        found = Some(c);
                        break;
                    }
                    jitter *= 10.0;
                }
                found.ok_or_else(|| Error::Singular("penalized normal equations".into()))?
            }
        };
        let mut coeffs = chol.solve(&self.xty);
        // Iterative refinement with compensated residuals; huge penalties
        // cancel catastrophically inside A*beta for near-null-space
        // solutions, so plain f64 residuals stall far from the answer.
        let mut prev_norm = f64::INFINITY;
        for _ in 0..40 {
            let residual = &self.xty - matvec_compensated(&a, &coeffs);
            let correction = chol.solve(&residual);
            let norm = correction.amax();
            if !norm.is_finite() || (jittered && norm > prev_norm) {
                break;
            }
            coeffs += &correction;
            if norm <= 1e-15 * coeffs.amax().max(1e-300) {
                break;
            }
            prev_norm = norm;
        }
        let rss = (self.yty - 2.0 * coeffs.dot(&self.xty)
            + coeffs.dot(&(&self.xtx * &coeffs)))
        .max(0.0);
        let edf = chol.solve(&self.xtx).trace();
        let n = self.n_obs as f64;
        let gcv = if n > edf {
            n * rss / ((n - edf) * (n - edf))
        } else {
            f64::INFINITY
        };
        Ok(SolvedFit { coeffs, rss, edf, gcv })
    }
}

/// Matrix-vector product with Neumaier-compensated row sums; keeps the
/// refinement residual meaningful when the penalty dwarfs the data term.
fn matvec_compensated(a: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let (rows, cols) = (a.nrows(), a.ncols());
    let mut out = DVector::zeros(rows);
    for i in 0..rows {
        let mut sum = 0.0_f64;
        let mut compensation = 0.0_f64;
        for j in 0..cols {
            let term = a[(i, j)] * x[j];
            let new_sum = sum + term;
            compensation += if sum.abs() >= term.abs() {
                (sum - new_sum) + term
            } else {
                (term - new_sum) + sum
            };
            sum = new_sum;
        }
        out[i] = sum + compensation;
    }
    out
}

/// `P1 (x) I_{d2}`: curvature penalty in the first coordinate.
fn kron_left(p1: &DMatrix<f64>, d2: usize) -> DMatrix<f64> {
    let d1 = p1.nrows();
    let mut out = DMatrix::zeros(d1 * d2, d1 * d2);
    for i in 0..d1 {
        for j in 0..d1 {
            let v = p1[(i, j)];
            if v == 0.0 {
                continue;
            }
            for r in 0..d2 {
                out[(i * d2 + r, j * d2 + r)] = v;
            }
        }
    }
    out
}

/// `I_{d1} (x) P2`: curvature penalty in the second coordinate.
fn kron_right(d1: usize, p2: &DMatrix<f64>) -> DMatrix<f64> {
    let d2 = p2.nrows();
    let mut out = DMatrix::zeros(d1 * d2, d1 * d2);
    for b in 0..d1 {
        let off = b * d2;
        for i in 0..d2 {
            for j in 0..d2 {
                out[(off + i, off + j)] = p2[(i, j)];
            }
        }
    }
    out
}

/// Penalized bivariate fit at fixed smoothing parameters.
pub fn fit_penalized_2d(
    obs: &[Obs2],
    d1: usize,
    d2: usize,
    lambda1: f64,
    lambda2: f64,
) -> Result<Penalized2DFit> {
    if obs.is_empty() {
        return Err(Error::domain("no observations"));
    }
    let basis1 = BSplineBasis::cubic(d1)?;
    let basis2 = BSplineBasis::cubic(d2)?;
    let eq = NormalEq::new_2d(obs, &basis1, &basis2)?;
    let pen1 = kron_left(&curvature_penalty(&basis1)?.matrix, d2);
    let pen2 = kron_right(d1, &curvature_penalty(&basis2)?.matrix);
    let solved = eq.solve(&(lambda1 * &pen1 + lambda2 * &pen2))?;
    Ok(Penalized2DFit {
        basis1,
        basis2,
        coeffs: solved.coeffs,
        lambda1,
        lambda2,
        gcv: solved.gcv,
        edf: solved.edf,
        rss: solved.rss,
        n_obs: eq.n_obs,
    })
}

/// Bivariate fit with GCV-selected smoothing parameters; ties are broken
/// toward the largest `lambda1 + lambda2`.
pub fn gcv_select(
    obs: &[Obs2],
    d1: usize,
    d2: usize,
    lambda_grid: &[(f64, f64)],
) -> Result<Penalized2DFit> {
    if lambda_grid.is_empty() {
        return Err(Error::domain("empty lambda grid"));
    }
    if obs.is_empty() {
        return Err(Error::domain("no observations"));
    }
    let basis1 = BSplineBasis::cubic(d1)?;
    let basis2 = BSplineBasis::cubic(d2)?;
    let eq = NormalEq::new_2d(obs, &basis1, &basis2)?;
    let pen1 = kron_left(&curvature_penalty(&basis1)?.matrix, d2);
    let pen2 = kron_right(d1, &curvature_penalty(&basis2)?.matrix);

    let mut scored: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(lambda_grid.len());
    for &(l1, l2) in lambda_grid {
        if l1 < 0.0 || l2 < 0.0 {
            return Err(Error::domain("negative smoothing parameter"));
        }
        let solved = eq.solve(&(l1 * &pen1 + l2 * &pen2))?;
        scored.push((l1, l2, solved.gcv, solved.edf));
    }
    let &(_, _, gcv_min, edf_min) = scored
        .iter()
        .min_by(|a, b| a.2.partial_cmp(&b.2).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap();
    let &(l1, l2, _, _) = scored
        .iter()
        .filter(|&&(_, _, gcv, edf)| gcv <= gcv_min + gcv_tie_window(gcv_min, edf_min, edf, eq.n_obs))
        .max_by(|a, b| {
            (a.0 + a.1)
                .partial_cmp(&(b.0 + b.1))
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .unwrap();
    let solved = eq.solve(&(l1 * &pen1 + l2 * &pen2))?;
    Ok(Penalized2DFit {
        basis1,
        basis2,
        coeffs: solved.coeffs,
        lambda1: l1,
        lambda2: l2,
        gcv: solved.gcv,
        edf: solved.edf,
        rss: solved.rss,
        n_obs: eq.n_obs,
    })
}

/// Penalized univariate fit at a fixed smoothing parameter.
pub fn fit_penalized_1d(obs: &[Obs1], dim: usize, lambda: f64) -> Result<Penalized1DFit> {
    if obs.is_empty() {
        return Err(Error::domain("no observations"));
    }
    let basis = BSplineBasis::cubic(dim)?;
    let eq = NormalEq::new_1d(obs, &basis)?;
    let pen = curvature_penalty(&basis)?.matrix;
    let solved = eq.solve(&(lambda * &pen))?;
    Ok(Penalized1DFit {
        basis,
        coeffs: solved.coeffs,
        lambda,
        gcv: solved.gcv,
        edf: solved.edf,
        rss: solved.rss,
        n_obs: eq.n_obs,
    })
}

/// Univariate fit with GCV-selected smoothing parameter, ties toward larger
/// lambda.
pub fn gcv_select_1d(obs: &[Obs1], dim: usize, lambda_grid: &[f64]) -> Result<Penalized1DFit> {
    if lambda_grid.is_empty() {
        return Err(Error::domain("empty lambda grid"));
    }
    if obs.is_empty() {
        return Err(Error::domain("no observations"));
    }
    let basis = BSplineBasis::cubic(dim)?;
    let eq = NormalEq::new_1d(obs, &basis)?;
    let pen = curvature_penalty(&basis)?.matrix;
    let mut scored: Vec<(f64, f64, f64)> = Vec::with_capacity(lambda_grid.len());
    for &l in lambda_grid {
        if l < 0.0 {
            return Err(Error::domain("negative smoothing parameter"));
        }
        let solved = eq.solve(&(l * &pen))?;
        scored.push((l, solved.gcv, solved.edf));
    }
    let &(_, gcv_min, edf_min) = scored
        .iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap();
    let &(l, _, _) = scored
        .iter()
        .filter(|&&(_, gcv, edf)| gcv <= gcv_min + gcv_tie_window(gcv_min, edf_min, edf, eq.n_obs))
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap();
    let solved = eq.solve(&(l * &pen))?;
    Ok(Penalized1DFit {
        basis,
        coeffs: solved.coeffs,
        lambda: l,
        gcv: solved.gcv,
        edf: solved.edf,
        rss: solved.rss,
        n_obs: eq.n_obs,
    })
}

/// Smooth a covariance surface from off-diagonal triples `(x1, x2, value)`.
///
/// The fit pools the triples with their transposes and selects a single
/// smoothing parameter (`lambda1 = lambda2`) by GCV; evaluation is
/// symmetrized. Triples on the diagonal are rejected: the caller is expected
/// to have removed them, since their values carry the noise inflation.
pub fn smooth_covariance_surface(
    triples: &[(f64, f64, f64)],
    dim: usize,
    lambda_grid: &[f64],
) -> Result<SmoothedSurface> {
    if let Some(&(a, b, _)) = triples.iter().find(|&&(a, b, _)| a == b) {
        return Err(Error::domain(format!(
            "diagonal triple ({a}, {b}) in covariance smoothing input"
        )));
    }
    let mut obs: Vec<Obs2> = Vec::with_capacity(2 * triples.len());
    for &(a, b, v) in triples {
        obs.push((a, b, v, 1.0));
    }
    for &(a, b, v) in triples {
        obs.push((b, a, v, 1.0));
    }
    let pairs: Vec<(f64, f64)> = lambda_grid.iter().map(|&l| (l, l)).collect();
    let fit = gcv_select(&obs, dim, dim, &pairs)?;
    Ok(fit.surface(true))
}
