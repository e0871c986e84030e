//! Score processes over visit time: projection of demeaned curves onto the
//! marginal eigenbasis, then per-component modeling of the resulting sparse
//! longitudinal scalars, either nonparametrically (sparse FPCA with BLUP
//! scores) or with a random intercept/slope model.

use std::collections::BTreeMap;
use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{GridSpec, LFDataset};
use crate::error::{Error, Result};
use crate::marginal::{eigenbasis, EigenBasis, PsdCovariance};
use crate::numerics::{
    interp_linear, nelder_mead, psd_reconstruct, solve_spd_with_jitter, weighted_eigh,
};
use crate::smoothing::{
    default_lambda_grid, gcv_select_1d, smooth_covariance_surface, Obs1, SmoothedSurface,
};

/// One projected score: subject, visit time, value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub subject: String,
    pub t: f64,
    pub value: f64,
}

/// All projected scores for one eigenbasis component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRecords {
    pub k: usize,
    pub records: Vec<ScoreRecord>,
}

impl ScoreRecords {
    /// Group records per subject in first-appearance order.
    pub fn by_subject(&self) -> Vec<(String, Vec<(f64, f64)>)> {
        let mut order: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        for rec in &self.records {
            match index.get(rec.subject.as_str()) {
                Some(&i) => order[i].1.push((rec.t, rec.value)),
                None => {
                    index.insert(rec.subject.as_str(), order.len());
                    order.push((rec.subject.clone(), vec![(rec.t, rec.value)]));
                }
            }
        }
        order
    }
}

/// Project demeaned curves onto the eigenbasis by grid quadrature. Masked
/// cells are dropped with the remaining weights rescaled to keep the total
/// quadrature mass equal to the grid range.
pub fn project_scores(demeaned: &LFDataset, basis: &EigenBasis) -> Result<Vec<ScoreRecords>> {
    if basis.grid.points() != demeaned.grid().points() {
        return Err(Error::schema("eigenbasis grid differs from the data grid"));
    }
    let grid = demeaned.grid();
    let weights = grid.weights();
    let range = grid.range();
    let mut all: Vec<ScoreRecords> = (0..basis.k())
        .map(|k| ScoreRecords {
            k,
            records: Vec::with_capacity(demeaned.n_visits()),
        })
        .collect();
    for (subject, visit) in demeaned.visits() {
        let scale = if visit.mask.iter().all(|&m| m) {
            1.0
        } else {
            let observed_mass: f64 = weights
                .iter()
                .zip(visit.mask.iter())
                .filter(|(_, &m)| m)
                .map(|(w, _)| w)
                .sum();
            if observed_mass <= 0.0 {
                continue; // fully masked visit projects to nothing
            }
            range / observed_mass
        };
        for (k, records) in all.iter_mut().enumerate() {
            let phi = &basis.phi[k];
            let mut acc = 0.0;
            for r in 0..grid.len() {
                if visit.mask[r] {
                    acc += visit.values[r] * phi[r] * weights[r];
                }
            }
            records.records.push(ScoreRecord {
                subject: subject.id.clone(),
                t: visit.t,
                value: acc * scale,
            });
        }
    }
    Ok(all)
}

/// Options for the nonparametric score-process fit.
#[derive(Debug, Clone)]
pub struct NonparametricOptions {
    /// Tensor dimension per axis for the covariance smooth.
    pub cov_dim: usize,
    /// Basis dimension for the univariate smooth of the raw diagonal.
    pub diag_dim: usize,
    pub lambda_grid: Vec<f64>,
    /// Boundary fraction excluded on each side when averaging the noise gap.
    pub trim: f64,
}

impl Default for NonparametricOptions {
    fn default() -> Self {
        Self {
            cov_dim: 10,
            diag_dim: 10,
            lambda_grid: default_lambda_grid(),
            trim: 0.0,
        }
    }
}

/// Fitted nonparametric score process for one component `k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LongitudinalComponent {
    pub k: usize,
    pub time_grid: GridSpec,
    pub g_surface: SmoothedSurface,
    /// Leading eigenfunctions of the score covariance on the time grid.
    pub psi: Vec<Vec<f64>>,
    /// Their eigenvalues, nonincreasing and positive.
    pub eta: Vec<f64>,
    pub sigma2_e: f64,
    pub pve_achieved: f64,
    pub total_variance: f64,
    /// Diagonal of the PSD-truncated covariance on the time grid; used by
    /// the noise estimator and exported for diagnostics.
    pub g_diag: Vec<f64>,
    pub blup: BTreeMap<String, Vec<f64>>,
}

impl LongitudinalComponent {
    pub fn l(&self) -> usize {
        self.psi.len()
    }

    /// Truncated covariance `sum_l eta_l psi_l(t) psi_l(t')` by interpolation.
    fn truncated_cov(&self, t1: f64, t2: f64) -> f64 {
        let grid = self.time_grid.points();
        self.psi
            .iter()
            .zip(self.eta.iter())
            .map(|(psi, eta)| eta * interp_linear(grid, psi, t1) * interp_linear(grid, psi, t2))
            .sum()
    }
}

/// Nonparametric fit of one score process: smooth the within-subject raw
/// cross-products (diagonal removed), truncate the operator to its positive
/// part, keep the PVE-selected leading eigenpairs, and estimate the score
/// noise from the diagonal gap.
pub fn fit_nonparametric(
    scores: &ScoreRecords,
    time_grid: &GridSpec,
    pve: f64,
    opts: &NonparametricOptions,
) -> Result<LongitudinalComponent> {
    let grouped = scores.by_subject();
    let repeated = grouped.iter().filter(|(_, v)| v.len() >= 2).count();
    if grouped.len() < 2 || repeated < 2 {
        return Err(Error::domain(
            "need at least two subjects with repeated visits to estimate the score covariance",
        ));
    }

    // Unordered within-subject pairs at distinct times; the covariance
    // smoother pools them with their transposes.
    let mut triples = Vec::new();
    let mut diag_obs: Vec<Obs1> = Vec::new();
    for (_, visits) in &grouped {
        for (j, &(t1, v1)) in visits.iter().enumerate() {
            diag_obs.push((t1, v1 * v1, 1.0));
            for &(t2, v2) in visits.iter().skip(j + 1) {
                if t1 != t2 {
                    triples.push((t1, t2, v1 * v2));
                }
            }
        }
    }
    if triples.is_empty() {
        return Err(Error::domain(
            "no off-diagonal score products; every subject has a single usable visit",
        ));
    }

    let g_surface = smooth_covariance_surface(&triples, opts.cov_dim, &opts.lambda_grid)?;
    let points = time_grid.points();
    let smoothed = g_surface.eval_grid(points, points)?;
    let (mut values, vectors) = weighted_eigh(&smoothed, time_grid.weights());
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let psd_matrix = psd_reconstruct(&values, &vectors);
    let psd = PsdCovariance {
        matrix: psd_matrix,
        eigenvalues: values,
        eigenvectors: vectors,
    };
    let pairs = eigenbasis(&psd, time_grid, pve)
        .map_err(|e| Error::fit("longitudinal-fpca", e.to_string()))?;

    // Noise variance: smoothed raw diagonal minus the fitted covariance
    // diagonal, averaged over the (optionally trimmed) time range.
    let diag_fit = gcv_select_1d(&diag_obs, opts.diag_dim, &opts.lambda_grid)?;
    let g_diag: Vec<f64> = (0..points.len()).map(|r| psd.matrix[(r, r)]).collect();
    let lo_t = opts.trim;
    let hi_t = 1.0 - opts.trim;
    let mut gap_acc = 0.0;
    let mut w_acc = 0.0;
    for (r, &t) in points.iter().enumerate() {
        if t < lo_t || t > hi_t {
            continue;
        }
        let w = time_grid.weights()[r];
        gap_acc += w * (diag_fit.eval(t)? - g_diag[r]);
        w_acc += w;
    }
    let sigma2_e = if w_acc > 0.0 { (gap_acc / w_acc).max(0.0) } else { 0.0 };

    Ok(LongitudinalComponent {
        k: scores.k,
        time_grid: time_grid.clone(),
        g_surface,
        psi: pairs.phi,
        eta: pairs.lambda,
        sigma2_e,
        pve_achieved: pairs.pve_achieved,
        total_variance: pairs.total_variance,
        g_diag,
        blup: BTreeMap::new(),
    })
}

/// Predict the component scores for every subject by the conditional
/// expectation under joint Gaussianity: `zeta = eta_l psi_l' Sigma^{-1} xi`
/// with `Sigma = Psi diag(eta) Psi' + sigma2_e I` assembled from the
/// truncated covariance.
pub fn blup_scores(component: &mut LongitudinalComponent, scores: &ScoreRecords) -> Result<()> {
    let l = component.l();
    let mut blup = BTreeMap::new();
    for (subject, visits) in scores.by_subject() {
        let m = visits.len();
        for &(t, _) in &visits {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::domain(format!(
                    "visit time {t} outside [0, 1] for subject `{subject}`"
                )));
            }
        }
        let mut sigma = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in 0..m {
                sigma[(a, b)] = component.truncated_cov(visits[a].0, visits[b].0);
            }
            sigma[(a, a)] += component.sigma2_e;
        }
        let xi = DVector::from_iterator(m, visits.iter().map(|&(_, v)| v));
        let solved = solve_spd_with_jitter(&sigma, &xi)?;
        let grid = component.time_grid.points();
        let mut zeta = Vec::with_capacity(l);
        for (psi, &eta) in component.psi.iter().zip(component.eta.iter()) {
            let mut acc = 0.0;
            for (a, &(t, _)) in visits.iter().enumerate() {
                acc += interp_linear(grid, psi, t) * solved[a];
            }
            zeta.push(eta * acc);
        }
        blup.insert(subject, zeta);
    }
    component.blup = blup;
    Ok(())
}

/// Evaluate the predicted score trajectory `xi_hat(t) = sum_l zeta_l psi_l(t)`
/// for a fitted subject at any time in [0, 1], including future times.
pub fn predict_xi(component: &LongitudinalComponent, subject_id: &str, t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("time {t} outside [0, 1]")));
    }
    let zeta = component
        .blup
        .get(subject_id)
        .ok_or_else(|| Error::UnknownSubject(subject_id.to_string()))?;
    let grid = component.time_grid.points();
    Ok(component
        .psi
        .iter()
        .zip(zeta.iter())
        .map(|(psi, z)| z * interp_linear(grid, psi, t))
        .sum())
}

/// Random intercept/slope model for one score process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct REMComponent {
    pub k: usize,
    /// Covariance of `(b0, b1)`.
    pub sigma_b: [[f64; 2]; 2],
    pub sigma2_e: f64,
    pub log_likelihood: f64,
    /// Estimation method recorded in exports; always plain ML here.
    pub method: String,
    pub blup: BTreeMap<String, (f64, f64)>,
}

struct RemObjective {
    subjects: Vec<Vec<(f64, f64)>>,
    scale: f64,
}

impl RemObjective {
    /// Negative marginal Gaussian log-likelihood over
    /// `theta = (log l11, l21, log l22, log sigma2_e)` with `Sigma_b = L L'`.
    fn eval(&self, theta: &[f64]) -> f64 {
        let bounds = 20.0;
        if theta.iter().any(|v| !v.is_finite() || v.abs() > bounds) {
            return f64::INFINITY;
        }
        let (sigma_b, sigma2_e) = Self::decode(theta, self.scale);
        let mut nll = 0.0;
        for visits in &self.subjects {
            let m = visits.len();
            let mut v = DMatrix::zeros(m, m);
            for a in 0..m {
                let za = [1.0, visits[a].0];
                for b in 0..m {
                    let zb = [1.0, visits[b].0];
                    let mut acc = 0.0;
                    for p in 0..2 {
                        for q in 0..2 {
                            acc += za[p] * sigma_b[p][q] * zb[q];
                        }
                    }
                    v[(a, b)] = acc;
                }
                v[(a, a)] += sigma2_e;
            }
            let chol = match v.cholesky() {
                Some(c) => c,
                None => return f64::INFINITY,
            };
            let logdet: f64 = (0..m).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>() * 2.0;
            let xi = DVector::from_iterator(m, visits.iter().map(|&(_, x)| x));
            let solved = chol.solve(&xi);
            nll += 0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + xi.dot(&solved));
        }
        nll
    }

    fn decode(theta: &[f64], scale: f64) -> ([[f64; 2]; 2], f64) {
        let floor = 1e-8 * scale;
        let l11 = theta[0].exp();
        let l21 = theta[1];
        let l22 = theta[2].exp();
        let sigma2_e = theta[3].exp().max(floor);
        let sigma_b = [
            [l11 * l11, l11 * l21],
            [l11 * l21, l21 * l21 + l22 * l22],
        ];
        (sigma_b, sigma2_e)
    }
}

/// Maximum-likelihood fit of the random intercept/slope model, with BLUPs
/// from the standard mixed-model conditional mean.
pub fn fit_rem(scores: &ScoreRecords) -> Result<REMComponent> {
    let grouped = scores.by_subject();
    if grouped.len() < 3 {
        return Err(Error::domain("random effects model needs at least 3 subjects"));
    }
    if !grouped.iter().any(|(_, v)| v.len() >= 3) {
        return Err(Error::domain(
            "random effects model needs a subject with at least 3 visits",
        ));
    }

    let all_values: Vec<f64> = grouped
        .iter()
        .flat_map(|(_, v)| v.iter().map(|&(_, x)| x))
        .collect();
    let n = all_values.len() as f64;
    let mean = all_values.iter().sum::<f64>() / n;
    let var = (all_values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).max(1e-4);

    let objective = RemObjective {
        subjects: grouped.iter().map(|(_, v)| v.clone()).collect(),
        scale: var,
    };

    let starts = [
        [
            (var / 2.0).sqrt().ln(),
            0.0,
            (var / 4.0).sqrt().ln(),
            (var / 2.0).ln(),
        ],
        [
            (var * 0.9).sqrt().ln(),
            0.0,
            (var * 0.05).sqrt().ln(),
            (var * 0.1).ln(),
        ],
        [
            (var * 0.1).sqrt().ln(),
            0.0,
            (var * 0.1).sqrt().ln(),
            (var * 0.9).ln(),
        ],
    ];
    let mut best: Option<crate::numerics::NelderMeadResult> = None;
    let mut diagnostics = Vec::new();
    for start in &starts {
        let res = nelder_mead(|x| objective.eval(x), start, 0.5, 1e-10, 2000);
        diagnostics.push(format!(
            "start {:?}: f={:.6}, iterations={}, converged={}",
            start, res.fx, res.iterations, res.converged
        ));
        if res.converged && res.fx.is_finite() {
            best = match best {
                Some(cur) if cur.fx <= res.fx => Some(cur),
                _ => Some(res),
            };
        }
    }
    let best = best.ok_or_else(|| Error::NonConvergence(diagnostics.join("; ")))?;
    let (sigma_b, sigma2_e) = RemObjective::decode(&best.x, var);

    let mut blup = BTreeMap::new();
    for (subject, visits) in &grouped {
        let m = visits.len();
        let mut v = DMatrix::zeros(m, m);
        for a in 0..m {
            let za = [1.0, visits[a].0];
            for b in 0..m {
                let zb = [1.0, visits[b].0];
                let mut acc = 0.0;
                for p in 0..2 {
                    for q in 0..2 {
                        acc += za[p] * sigma_b[p][q] * zb[q];
                    }
                }
                v[(a, b)] = acc;
            }
            v[(a, a)] += sigma2_e;
        }
        let xi = DVector::from_iterator(m, visits.iter().map(|&(_, x)| x));
        let solved = solve_spd_with_jitter(&v, &xi)?;
        // b_hat = Sigma_b Z' V^{-1} xi
        let mut zt_solved = [0.0; 2];
        for (a, &(t, _)) in visits.iter().enumerate() {
            zt_solved[0] += solved[a];
            zt_solved[1] += t * solved[a];
        }
        let b0 = sigma_b[0][0] * zt_solved[0] + sigma_b[0][1] * zt_solved[1];
        let b1 = sigma_b[1][0] * zt_solved[0] + sigma_b[1][1] * zt_solved[1];
        blup.insert(subject.clone(), (b0, b1));
    }

    Ok(REMComponent {
        k: scores.k,
        sigma_b,
        sigma2_e,
        log_likelihood: -best.fx,
        method: "ml".to_string(),
        blup,
    })
}

/// Predicted score trajectory under the random effects model.
pub fn predict_xi_rem(component: &REMComponent, subject_id: &str, t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("time {t} outside [0, 1]")));
    }
    let &(b0, b1) = component
        .blup
        .get(subject_id)
        .ok_or_else(|| Error::UnknownSubject(subject_id.to_string()))?;
    Ok(b0 + b1 * t)
}
