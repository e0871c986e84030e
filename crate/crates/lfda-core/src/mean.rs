//! Mean-surface estimation: fully bivariate tensor-product fit, the
//! varying-coefficient form `mu0(s) + beta_T(s) T`, and a T-constant profile.

use serde::{Deserialize, Serialize};

use crate::dataset::LFDataset;
use crate::error::{Error, Result};
use crate::numerics::interp_linear;
use crate::smoothing::{
    gcv_select, gcv_select_1d, Obs1, Obs2, SmoothedSurface,
};

/// Default tensor dimensions for the bivariate mean.
pub const DEFAULT_DS: usize = 10;
pub const DEFAULT_DT: usize = 5;

/// Fitted mean surface, evaluable anywhere on [0, 1]^2. Curve variants are
/// stored on the data grid and interpolated linearly in `s`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum MeanSurface {
    Bivariate(SmoothedSurface),
    VaryingCoefficient {
        s_grid: Vec<f64>,
        mu0: Vec<f64>,
        beta_t: Vec<f64>,
    },
    ConstantInT {
        s_grid: Vec<f64>,
        mu0: Vec<f64>,
    },
}

impl MeanSurface {
    pub fn evaluate(&self, s: f64, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("point ({s}, {t}) outside [0, 1]^2")));
        }
        Ok(match self {
            MeanSurface::Bivariate(surface) => surface.eval(s, t)?,
            MeanSurface::VaryingCoefficient { s_grid, mu0, beta_t } => {
                interp_linear(s_grid, mu0, s) + interp_linear(s_grid, beta_t, s) * t
            }
            MeanSurface::ConstantInT { s_grid, mu0 } => interp_linear(s_grid, mu0, s),
        })
    }

    /// Zero mean, useful for pre-demeaned data.
    pub fn zero(s_grid: Vec<f64>) -> Self {
        let mu0 = vec![0.0; s_grid.len()];
        MeanSurface::ConstantInT { s_grid, mu0 }
    }

    /// Slope curve of the varying-coefficient variant, if applicable.
    pub fn slope_curve(&self) -> Option<&[f64]> {
        match self {
            MeanSurface::VaryingCoefficient { beta_t, .. } => Some(beta_t),
            _ => None,
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            MeanSurface::Bivariate(_) => "bivariate",
            MeanSurface::VaryingCoefficient { .. } => "varying-coefficient",
            MeanSurface::ConstantInT { .. } => "constant",
        }
    }

    /// Negate in place; handy for un-demeaning in tests and the bootstrap.
    pub fn negated(&self) -> Result<MeanSurface> {
        match self {
            MeanSurface::VaryingCoefficient { s_grid, mu0, beta_t } => {
                Ok(MeanSurface::VaryingCoefficient {
                    s_grid: s_grid.clone(),
                    mu0: mu0.iter().map(|v| -v).collect(),
                    beta_t: beta_t.iter().map(|v| -v).collect(),
                })
            }
            MeanSurface::ConstantInT { s_grid, mu0 } => Ok(MeanSurface::ConstantInT {
                s_grid: s_grid.clone(),
                mu0: mu0.iter().map(|v| -v).collect(),
            }),
            MeanSurface::Bivariate(_) => Err(Error::domain(
                "cannot negate a bivariate spline mean in place",
            )),
        }
    }
}

/// Pooled penalized tensor-product fit of the bivariate mean.
pub fn fit_bivariate_mean(
    data: &LFDataset,
    dims: (usize, usize),
    lambda_pairs: &[(f64, f64)],
) -> Result<MeanSurface> {
    let points = data.grid().points();
    let mut obs: Vec<Obs2> = Vec::new();
    for (_, visit) in data.visits() {
        for (r, &s) in points.iter().enumerate() {
            if visit.mask[r] {
                obs.push((s, visit.t, visit.values[r], 1.0));
            }
        }
    }
    if obs.is_empty() {
        return Err(Error::domain("all cells masked; nothing to fit"));
    }
    let fit = gcv_select(&obs, dims.0, dims.1, lambda_pairs)?;
    Ok(MeanSurface::Bivariate(fit.surface(false)))
}

/// Two-stage varying-coefficient fit: pointwise-in-s regression of the
/// observations on `(1, t)`, then penalized univariate smoothing of the two
/// coefficient curves.
pub fn fit_varying_coefficient_mean(
    data: &LFDataset,
    d_s: usize,
    lambda_grid: &[f64],
) -> Result<MeanSurface> {
    let mut distinct: Vec<f64> = data.visits().map(|(_, v)| v.t).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::domain(
            "varying-coefficient mean needs at least two distinct visit times",
        ));
    }

    let points = data.grid().points();
    let mut intercept_obs: Vec<Obs1> = Vec::new();
    let mut slope_obs: Vec<Obs1> = Vec::new();
    for (r, &s) in points.iter().enumerate() {
        let mut n = 0.0;
        let (mut st, mut stt, mut sy, mut sty) = (0.0, 0.0, 0.0, 0.0);
        for (_, visit) in data.visits() {
            if !visit.mask[r] {
                continue;
            }
            let (t, y) = (visit.t, visit.values[r]);
            n += 1.0;
            st += t;
            stt += t * t;
            sy += y;
            sty += t * y;
        }
        let det = n * stt - st * st;
        if n < 2.0 || det.abs() < 1e-12 * (n * stt).max(1.0) {
            continue; // degenerate grid point, let the smoother fill it in
        }
        let slope = (n * sty - st * sy) / det;
        let intercept = (sy - slope * st) / n;
        intercept_obs.push((s, intercept, 1.0));
        slope_obs.push((s, slope, 1.0));
    }
    if intercept_obs.is_empty() {
        return Err(Error::domain(
            "no grid point has enough observations for the pointwise regression",
        ));
    }

    let mu0_fit = gcv_select_1d(&intercept_obs, d_s, lambda_grid)?;
    let beta_fit = gcv_select_1d(&slope_obs, d_s, lambda_grid)?;
    let mu0 = points
        .iter()
        .map(|&s| mu0_fit.eval(s))
        .collect::<Result<Vec<f64>>>()?;
    let beta_t = points
        .iter()
        .map(|&s| beta_fit.eval(s))
        .collect::<Result<Vec<f64>>>()?;
    Ok(MeanSurface::VaryingCoefficient {
        s_grid: points.to_vec(),
        mu0,
        beta_t,
    })
}

/// T-constant mean profile: pooled penalized univariate smooth over `s`.
pub fn fit_constant_mean(data: &LFDataset, d_s: usize, lambda_grid: &[f64]) -> Result<MeanSurface> {
    let points = data.grid().points();
    let mut obs: Vec<Obs1> = Vec::new();
    for (_, visit) in data.visits() {
        for (r, &s) in points.iter().enumerate() {
            if visit.mask[r] {
                obs.push((s, visit.values[r], 1.0));
            }
        }
    }
    if obs.is_empty() {
        return Err(Error::domain("all cells masked; nothing to fit"));
    }
    let fit = gcv_select_1d(&obs, d_s, lambda_grid)?;
    let mu0 = points
        .iter()
        .map(|&s| fit.eval(s))
        .collect::<Result<Vec<f64>>>()?;
    Ok(MeanSurface::ConstantInT {
        s_grid: points.to_vec(),
        mu0,
    })
}
