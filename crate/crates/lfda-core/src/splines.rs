//! Univariate B-spline bases, curvature penalties, and tensor-product rows.
//!
//! Bases are clamped (open knot vector) with equispaced interior knots on
//! [0, 1]. Curvature penalties are integrated exactly per knot span with
//! Gauss-Legendre quadrature.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum supported spline degree. Evaluation uses fixed-size scratch
/// buffers of `MAX_DEGREE + 1`.
pub const MAX_DEGREE: usize = 7;

/// A univariate B-spline basis of `dim` functions on [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    degree: usize,
    knots: Vec<f64>,
    dim: usize,
}

impl BSplineBasis {
    /// Clamped basis with equispaced interior knots. `dim` must be at least
    /// `degree + 1` (no interior knots) and degree at most [`MAX_DEGREE`].
    pub fn new(degree: usize, dim: usize) -> Result<Self> {
        if degree == 0 || degree > MAX_DEGREE {
            return Err(Error::domain(format!(
                "spline degree must be in 1..={MAX_DEGREE}, got {degree}"
            )));
        }
        if dim < degree + 1 {
            return Err(Error::domain(format!(
                "basis dim {dim} too small for degree {degree} (need >= {})",
                degree + 1
            )));
        }
        let n_interior = dim - degree - 1;
        let mut knots = Vec::with_capacity(dim + degree + 1);
        knots.extend(std::iter::repeat(0.0).take(degree + 1));
        for i in 1..=n_interior {
            knots.push(i as f64 / (n_interior + 1) as f64);
        }
        knots.extend(std::iter::repeat(1.0).take(degree + 1));
        Ok(Self { degree, knots, dim })
    }

    /// Cubic basis, the default throughout.
    pub fn cubic(dim: usize) -> Result<Self> {
        Self::new(3, dim)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Index `mu` of the knot span containing `x`: `knots[mu] <= x < knots[mu+1]`,
    /// clamped so that `mu` always addresses a nonempty span.
    fn span(&self, x: f64) -> usize {
        let p = self.degree;
        let last = self.dim - 1; // last valid span start
        if x >= 1.0 {
            return last;
        }
        // Binary search over knots[p..=dim] for the containing span.
        let mut lo = p;
        let mut hi = self.dim;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo.min(last)
    }

    /// Evaluate the `degree + 1` non-vanishing basis functions at `x`,
    /// writing them into `out[0..=degree]`. Returns the index of the first
    /// non-vanishing function. `x` must already be inside [0, 1].
    pub fn eval_nonzero(&self, x: f64, out: &mut [f64]) -> usize {
        let p = self.degree;
        debug_assert!((0.0..=1.0).contains(&x));
        debug_assert!(out.len() >= p + 1);
        let mu = self.span(x);
        let mut left = [0.0_f64; MAX_DEGREE + 1];
        let mut right = [0.0_f64; MAX_DEGREE + 1];
        out[0] = 1.0;
        for j in 1..=p {
            left[j] = x - self.knots[mu + 1 - j];
            right[j] = self.knots[mu + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        mu - p
    }

    /// Full-length basis evaluation at `x` in [0, 1].
    pub fn eval_basis(&self, x: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::domain(format!("point {x} outside [0, 1]")));
        }
        let mut local = [0.0_f64; MAX_DEGREE + 1];
        let start = self.eval_nonzero(x, &mut local);
        let mut full = vec![0.0; self.dim];
        full[start..start + self.degree + 1].copy_from_slice(&local[..self.degree + 1]);
        Ok(full)
    }

    /// Second derivatives of the non-vanishing basis functions at `x`,
    /// written into `out[0..=degree]`; returns the first function index.
    pub fn eval_deriv2_nonzero(&self, x: f64, out: &mut [f64]) -> usize {
        let p = self.degree;
        debug_assert!(p >= 2);
        let mu = self.span(x);
        let t = &self.knots;

        // Non-vanishing degree p-2 functions at x: indices mu-(p-2) ..= mu.
        let mut lower = [0.0_f64; MAX_DEGREE + 1];
        {
            let q = p - 2;
            let mut left = [0.0_f64; MAX_DEGREE + 1];
            let mut right = [0.0_f64; MAX_DEGREE + 1];
            lower[0] = 1.0;
            for j in 1..=q {
                left[j] = x - t[mu + 1 - j];
                right[j] = t[mu + j] - x;
                let mut saved = 0.0;
                for r in 0..j {
                    let temp = lower[r] / (right[r + 1] + left[j - r]);
                    lower[r] = saved + right[r + 1] * temp;
                    saved = left[j - r] * temp;
                }
                lower[j] = saved;
            }
        }
        let lower_at = |i: usize| -> f64 {
            // lower holds N_{mu-(p-2)..=mu, p-2}
            let lo = mu + 2 - p;
            if i < lo || i > mu {
                0.0
            } else {
                lower[i - lo]
            }
        };
        let safe_div = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };

        let factor = (p * (p - 1)) as f64;
        for (slot, i) in (mu - p..=mu).enumerate() {
            let d1 = t[i + p] - t[i];
            let d2 = t[i + p - 1] - t[i];
            let d3 = t[i + p] - t[i + 1];
            let d4 = t[i + p + 1] - t[i + 1];
            let d5 = t[i + p + 1] - t[i + 2];
            let term1 = safe_div(safe_div(lower_at(i), d2), d1);
            let term2 = safe_div(safe_div(lower_at(i + 1), d3), d1)
                + safe_div(safe_div(lower_at(i + 1), d3), d4);
            let term3 = safe_div(safe_div(lower_at(i + 2), d5), d4);
            out[slot] = factor * (term1 - term2 + term3);
        }
        mu - p
    }
}

/// Symmetric positive-semidefinite curvature penalty `P[q,q'] = ∫ B_q'' B_q''`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub matrix: DMatrix<f64>,
}

// 5-point Gauss-Legendre rule on [-1, 1]; exact for polynomials up to degree 9,
// covering B''-products of any supported spline degree.
const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

/// Curvature penalty for `basis`, integrated span by span.
pub fn curvature_penalty(basis: &BSplineBasis) -> Result<PenaltyMatrix> {
    let p = basis.degree();
    if p < 2 {
        return Err(Error::domain(format!(
            "curvature penalty requires degree >= 2, got {p}"
        )));
    }
    let dim = basis.dim();
    let knots = basis.knots();
    let mut matrix = DMatrix::zeros(dim, dim);
    let mut d2 = [0.0_f64; MAX_DEGREE + 1];
    for span in p..dim {
        let (a, b) = (knots[span], knots[span + 1]);
        if b <= a {
            continue;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (node, weight) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
            let x = mid + half * node;
            let start = basis.eval_deriv2_nonzero(x, &mut d2);
            let w = weight * half;
            for i in 0..=p {
                let di = d2[i];
                if di == 0.0 {
                    continue;
                }
                for j in 0..=p {
                    matrix[(start + i, start + j)] += w * di * d2[j];
                }
            }
        }
    }
    // Symmetrize away quadrature round-off.
    for i in 0..dim {
        for j in (i + 1)..dim {
            let v = 0.5 * (matrix[(i, j)] + matrix[(j, i)]);
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    Ok(PenaltyMatrix { matrix })
}

/// Tensor-product design row at `(s, t)`: the Kronecker-ordered outer product
/// of the two univariate basis evaluations, index `q1 * d_t + q2`.
pub fn tensor_row(basis_s: &BSplineBasis, basis_t: &BSplineBasis, s: f64, t: f64) -> Result<Vec<f64>> {
    let bs = basis_s.eval_basis(s)?;
    let bt = basis_t.eval_basis(t)?;
    let mut row = vec![0.0; basis_s.dim() * basis_t.dim()];
    for (q1, &vs) in bs.iter().enumerate() {
        if vs == 0.0 {
            continue;
        }
        let offset = q1 * basis_t.dim();
        for (q2, &vt) in bt.iter().enumerate() {
            row[offset + q2] = vs * vt;
        }
    }
    Ok(row)
}
