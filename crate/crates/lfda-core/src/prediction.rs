//! Full-trajectory reconstruction and the naive baseline predictor.

use crate::dataset::LFDataset;
use crate::error::{Error, Result};
use crate::model::FittedModel;

/// Reconstruct the predicted curve on the grid at time `t`:
/// `y_hat(s) = mu_hat(s, t) + sum_k xi_hat_k(t) phi_k(s)`.
pub fn reconstruct(model: &FittedModel, subject_id: &str, t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("time {t} outside [0, 1]")));
    }
    if !model.has_subject(subject_id) {
        return Err(Error::UnknownSubject(subject_id.to_string()));
    }
    let points = model.grid().points();
    let mut curve = Vec::with_capacity(points.len());
    for &s in points {
        curve.push(model.mean.evaluate(s, t)?);
    }
    for (k, component) in model.components.iter().enumerate() {
        let xi = component.predict(subject_id, t)?;
        let phi = &model.basis.phi[k];
        for (c, &p) in curve.iter_mut().zip(phi.iter()) {
            *c += xi * p;
        }
    }
    Ok(curve)
}

/// Baseline predictor: the mask-aware pointwise average of the subject's
/// training curves. Cells never observed for the subject come out as NaN.
pub fn naive_predict(train: &LFDataset, subject_id: &str) -> Result<Vec<f64>> {
    let subject = train
        .subject(subject_id)
        .ok_or_else(|| Error::UnknownSubject(subject_id.to_string()))?;
    let r = train.grid().len();
    let mut sums = vec![0.0; r];
    let mut counts = vec![0usize; r];
    for visit in &subject.visits {
        for i in 0..r {
            if visit.mask[i] {
                sums[i] += visit.values[i];
                counts[i] += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect())
}

/// In-sample integrated prediction error against the observed data:
/// `sum_ij integral (y_ij(s) - y_hat_ij(s))^2 ds / sum_i m_i`, with masked
/// cells excluded and the quadrature mass renormalized over observed cells.
/// This is the goodness-of-fit variant for real data; the simulation metrics
/// compare against the noiseless truth instead.
pub fn in_sample_ipe_observed(model: &FittedModel, data: &LFDataset) -> Result<f64> {
    let grid = data.grid();
    let weights = grid.weights();
    let range = grid.range();
    let mut total = 0.0;
    let mut n_visits = 0usize;
    for (subject, visit) in data.visits() {
        let predicted = reconstruct(model, &subject.id, visit.t)?;
        let mut acc = 0.0;
        let mut mass = 0.0;
        for r in 0..grid.len() {
            if visit.mask[r] {
                let diff = visit.values[r] - predicted[r];
                acc += diff * diff * weights[r];
                mass += weights[r];
            }
        }
        if mass > 0.0 {
            total += acc * (range / mass);
            n_visits += 1;
        }
    }
    if n_visits == 0 {
        return Err(Error::domain("no observed visits"));
    }
    Ok(total / n_visits as f64)
}
