//! Shared helpers for integration tests: brute-force conditional-MVN
//! oracles built from assembled joint covariance matrices.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Conditional mean of `z` given `x` under a joint zero-mean Gaussian with
/// `cov(z) = diag(eta)`, `cov(z, x) = diag(eta) Psi'`, and
/// `cov(x) = Psi diag(eta) Psi' + sigma2 I`, computed from the assembled
/// `(l + m) x (l + m)` covariance matrix by direct inversion.
pub fn conditional_mvn_oracle(
    psi: &DMatrix<f64>, // m x l evaluations
    eta: &[f64],
    sigma2: f64,
    x: &DVector<f64>,
) -> DVector<f64> {
    let (m, l) = (psi.nrows(), psi.ncols());
    let dim = l + m;
    let mut joint = DMatrix::<f64>::zeros(dim, dim);
    for a in 0..l {
        joint[(a, a)] = eta[a];
    }
    for a in 0..l {
        for b in 0..m {
            let c = eta[a] * psi[(b, a)];
            joint[(a, l + b)] = c;
            joint[(l + b, a)] = c;
        }
    }
    for a in 0..m {
        for b in 0..m {
            let mut acc = 0.0;
            for q in 0..l {
                acc += psi[(a, q)] * eta[q] * psi[(b, q)];
            }
            joint[(l + a, l + b)] = acc + if a == b { sigma2 } else { 0.0 };
        }
    }
    let cov_xx = joint.view((l, l), (m, m)).into_owned();
    let cov_zx = joint.view((0, l), (l, m)).into_owned();
    let inv = cov_xx.try_inverse().expect("conditional covariance invertible");
    &cov_zx * (inv * x)
}

/// Conditional mean of `(b0, b1)` given observed `xi` at times `t` under the
/// random intercept/slope model, from the assembled joint covariance.
pub fn rem_conditional_oracle(
    sigma_b: [[f64; 2]; 2],
    sigma2_e: f64,
    times: &[f64],
    xi: &DVector<f64>,
) -> (f64, f64) {
    let m = times.len();
    let mut psi = DMatrix::<f64>::zeros(m, 2);
    for (j, &t) in times.iter().enumerate() {
        psi[(j, 0)] = 1.0;
        psi[(j, 1)] = t;
    }
    // Same assembly as above but with a full 2x2 prior covariance.
    let dim = 2 + m;
    let mut joint = DMatrix::<f64>::zeros(dim, dim);
    for a in 0..2 {
        for b in 0..2 {
            joint[(a, b)] = sigma_b[a][b];
        }
    }
    for a in 0..2 {
        for j in 0..m {
            let mut c = 0.0;
            for q in 0..2 {
                c += sigma_b[a][q] * psi[(j, q)];
            }
            joint[(a, 2 + j)] = c;
            joint[(2 + j, a)] = c;
        }
    }
    for i in 0..m {
        for j in 0..m {
            let mut acc = 0.0;
            for p in 0..2 {
                for q in 0..2 {
                    acc += psi[(i, p)] * sigma_b[p][q] * psi[(j, q)];
                }
            }
            joint[(2 + i, 2 + j)] = acc + if i == j { sigma2_e } else { 0.0 };
        }
    }
    let cov_xx = joint.view((2, 2), (m, m)).into_owned();
    let cov_zx = joint.view((0, 2), (2, m)).into_owned();
    let inv = cov_xx.try_inverse().expect("invertible");
    let b = &cov_zx * (inv * xi);
    (b[0], b[1])
}
