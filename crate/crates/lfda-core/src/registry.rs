//! Runtime-selectable strategies: mean-surface models and score-process
//! models live behind common traits and are looked up by name, so the CLI and
//! the simulation harness can switch variants from configuration.

use serde::{Deserialize, Serialize};

use crate::dataset::{GridSpec, LFDataset};
use crate::error::{Error, Result};
use crate::longitudinal::{
    blup_scores, fit_nonparametric, fit_rem, predict_xi, predict_xi_rem, LongitudinalComponent,
    NonparametricOptions, REMComponent, ScoreRecords,
};
use crate::mean::{
    fit_bivariate_mean, fit_constant_mean, fit_varying_coefficient_mean, MeanSurface,
};

/// A fitted score-process component for one eigenbasis direction, whichever
/// strategy produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ScoreComponent {
    Nonparametric(LongitudinalComponent),
    RandomEffects(REMComponent),
}

impl ScoreComponent {
    pub fn k(&self) -> usize {
        match self {
            ScoreComponent::Nonparametric(c) => c.k,
            ScoreComponent::RandomEffects(c) => c.k,
        }
    }

    /// Predicted score trajectory at any time in [0, 1].
    pub fn predict(&self, subject_id: &str, t: f64) -> Result<f64> {
        match self {
            ScoreComponent::Nonparametric(c) => predict_xi(c, subject_id, t),
            ScoreComponent::RandomEffects(c) => predict_xi_rem(c, subject_id, t),
        }
    }

    pub fn sigma2_e(&self) -> f64 {
        match self {
            ScoreComponent::Nonparametric(c) => c.sigma2_e,
            ScoreComponent::RandomEffects(c) => c.sigma2_e,
        }
    }

    /// Number of fitted random terms (L_k, or 2 for intercept/slope).
    pub fn n_terms(&self) -> usize {
        match self {
            ScoreComponent::Nonparametric(c) => c.l(),
            ScoreComponent::RandomEffects(_) => 2,
        }
    }

    pub fn strategy_name(&self) -> &'static str {
        match self {
            ScoreComponent::Nonparametric(_) => "np",
            ScoreComponent::RandomEffects(_) => "rem",
        }
    }

    pub fn has_subject(&self, subject_id: &str) -> bool {
        match self {
            ScoreComponent::Nonparametric(c) => c.blup.contains_key(subject_id),
            ScoreComponent::RandomEffects(c) => c.blup.contains_key(subject_id),
        }
    }

    pub fn subjects(&self) -> Vec<&String> {
        match self {
            ScoreComponent::Nonparametric(c) => c.blup.keys().collect(),
            ScoreComponent::RandomEffects(c) => c.blup.keys().collect(),
        }
    }
}

/// Shared inputs for fitting a score process.
pub struct ScoreFitContext {
    pub time_grid: GridSpec,
    pub pve: f64,
    pub np_options: NonparametricOptions,
}

/// A score-process modeling strategy, selectable by name.
pub trait ScoreProcessModel: Sync {
    fn name(&self) -> &'static str;
    fn describe(&self) -> &'static str;
    fn fit(&self, scores: &ScoreRecords, ctx: &ScoreFitContext) -> Result<ScoreComponent>;
}

/// Sparse FPCA of the score process with BLUP predictions.
pub struct NonparametricScoreModel;

impl ScoreProcessModel for NonparametricScoreModel {
    fn name(&self) -> &'static str {
        "np"
    }

    fn describe(&self) -> &'static str {
        "nonparametric score covariance (sparse FPCA with BLUP scores)"
    }

    fn fit(&self, scores: &ScoreRecords, ctx: &ScoreFitContext) -> Result<ScoreComponent> {
        let mut component = fit_nonparametric(scores, &ctx.time_grid, ctx.pve, &ctx.np_options)?;
        blup_scores(&mut component, scores)?;
        Ok(ScoreComponent::Nonparametric(component))
    }
}

/// Random intercept/slope model fitted by maximum likelihood.
pub struct RandomEffectsScoreModel;

impl ScoreProcessModel for RandomEffectsScoreModel {
    fn name(&self) -> &'static str {
        "rem"
    }

    fn describe(&self) -> &'static str {
        "random intercept/slope model (ML fit, mixed-model BLUPs)"
    }

    fn fit(&self, scores: &ScoreRecords, _ctx: &ScoreFitContext) -> Result<ScoreComponent> {
        Ok(ScoreComponent::RandomEffects(fit_rem(scores)?))
    }
}

static SCORE_MODELS: [&dyn ScoreProcessModel; 2] =
    [&NonparametricScoreModel, &RandomEffectsScoreModel];

/// Look up a score-process strategy by its registered name.
pub fn score_model(name: &str) -> Result<&'static dyn ScoreProcessModel> {
    SCORE_MODELS
        .iter()
        .copied()
        .find(|m| m.name() == name)
        .ok_or_else(|| {
            Error::config(format!(
                "unknown score model `{name}`; available: {}",
                score_model_names().join(", ")
            ))
        })
}

pub fn score_model_names() -> Vec<&'static str> {
    SCORE_MODELS.iter().map(|m| m.name()).collect()
}

/// Shared inputs for fitting a mean surface.
pub struct MeanFitContext {
    /// Tensor dimensions `(d_s, d_T)` for the bivariate variant.
    pub dims: (usize, usize),
    /// Anisotropic smoothing-parameter grid for the bivariate variant.
    pub lambda_pairs: Vec<(f64, f64)>,
    /// Univariate grid for the curve variants.
    pub lambda_grid: Vec<f64>,
}

/// A mean-surface strategy, selectable by name.
pub trait MeanModel: Sync {
    fn name(&self) -> &'static str;
    fn describe(&self) -> &'static str;
    fn fit(&self, data: &LFDataset, ctx: &MeanFitContext) -> Result<MeanSurface>;
}

pub struct BivariateMeanModel;

impl MeanModel for BivariateMeanModel {
    fn name(&self) -> &'static str {
        "bivariate"
    }

    fn describe(&self) -> &'static str {
        "penalized tensor-product surface over (s, T)"
    }

    fn fit(&self, data: &LFDataset, ctx: &MeanFitContext) -> Result<MeanSurface> {
        fit_bivariate_mean(data, ctx.dims, &ctx.lambda_pairs)
    }
}

pub struct VaryingCoefficientMeanModel;

impl MeanModel for VaryingCoefficientMeanModel {
    fn name(&self) -> &'static str {
        "varying-coefficient"
    }

    fn describe(&self) -> &'static str {
        "mu0(s) + beta_T(s) T, pointwise regression then penalized smoothing"
    }

    fn fit(&self, data: &LFDataset, ctx: &MeanFitContext) -> Result<MeanSurface> {
        fit_varying_coefficient_mean(data, ctx.dims.0, &ctx.lambda_grid)
    }
}

pub struct ConstantMeanModel;

impl MeanModel for ConstantMeanModel {
    fn name(&self) -> &'static str {
        "constant"
    }

    fn describe(&self) -> &'static str {
        "time-constant profile mu0(s)"
    }

    fn fit(&self, data: &LFDataset, ctx: &MeanFitContext) -> Result<MeanSurface> {
        fit_constant_mean(data, ctx.dims.0, &ctx.lambda_grid)
    }
}

static MEAN_MODELS: [&dyn MeanModel; 3] = [
    &BivariateMeanModel,
    &VaryingCoefficientMeanModel,
    &ConstantMeanModel,
];

/// Look up a mean-surface strategy by its registered name.
pub fn mean_model(name: &str) -> Result<&'static dyn MeanModel> {
    MEAN_MODELS
        .iter()
        .copied()
        .find(|m| m.name() == name)
        .ok_or_else(|| {
            Error::config(format!(
                "unknown mean model `{name}`; available: {}",
                mean_model_names().join(", ")
            ))
        })
}

pub fn mean_model_names() -> Vec<&'static str> {
    MEAN_MODELS.iter().map(|m| m.name()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_by_name() {
        assert_eq!(score_model("np").unwrap().name(), "np");
        assert_eq!(score_model("rem").unwrap().name(), "rem");
        assert!(score_model("arima").is_err());
        assert_eq!(mean_model("bivariate").unwrap().name(), "bivariate");
        assert_eq!(mean_model("varying-coefficient").unwrap().name(), "varying-coefficient");
        assert_eq!(mean_model("constant").unwrap().name(), "constant");
        assert!(mean_model("spline").is_err());
        assert_eq!(score_model_names(), vec!["np", "rem"]);
        assert_eq!(mean_model_names().len(), 3);
    }
}
