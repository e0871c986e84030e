//! End-to-end fit pipeline and model persistence.
//!
//! A fitted model bundles the mean surface, the marginal eigenbasis, the
//! per-component score processes, and the white-noise variance; it is all
//! that is needed to reconstruct a subject's curve at any time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{GridSpec, LFDataset};
use crate::error::{Error, Result};
use crate::longitudinal::{project_scores, NonparametricOptions};
use crate::marginal::{
    estimate_white_noise, eigenbasis, pooled_raw_covariance, smooth_and_truncate, EigenBasis,
};
use crate::mean::MeanSurface;
use crate::registry::{mean_model, score_model, MeanFitContext, ScoreComponent, ScoreFitContext};
use crate::smoothing::default_lambda_grid;

pub const SCHEMA_VERSION: u32 = 1;

/// Fit configuration; defaults mirror the reference setup: PVE 0.95, mean
/// dimensions 10 x 5, covariance smooths 10 per axis, 41-point time grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub mean_model: String,
    pub score_model: String,
    pub pve: f64,
    pub mean_dims: (usize, usize),
    pub cov_dim: usize,
    pub time_grid_len: usize,
    /// Boundary trim fraction for the noise-variance estimators.
    pub trim: f64,
    /// Log-spaced smoothing-parameter grid shared by all smoothers.
    pub lambda_grid: Vec<f64>,
    /// Recorded for provenance; the fit itself is deterministic.
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            mean_model: "bivariate".into(),
            score_model: "np".into(),
            pve: 0.95,
            mean_dims: (10, 5),
            cov_dim: 10,
            time_grid_len: 41,
            trim: 0.0,
            lambda_grid: default_lambda_grid(),
            seed: 0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.pve && self.pve < 1.0) {
            return Err(Error::config(format!("pve must be in (0, 1), got {}", self.pve)));
        }
        if self.time_grid_len < 2 {
            return Err(Error::config("time grid needs at least 2 points"));
        }
        if !(0.0..0.5).contains(&self.trim) {
            return Err(Error::config("trim fraction must be in [0, 0.5)"));
        }
        mean_model(&self.mean_model)?;
        score_model(&self.score_model)?;
        Ok(())
    }

    fn lambda_pairs(&self) -> Vec<(f64, f64)> {
        let mut pairs = Vec::with_capacity(self.lambda_grid.len() * self.lambda_grid.len());
        for &l1 in &self.lambda_grid {
            for &l2 in &self.lambda_grid {
                pairs.push((l1, l2));
            }
        }
        pairs
    }
}

/// A fully fitted model, sufficient to evaluate predicted curves anywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub mean: MeanSurface,
    pub basis: EigenBasis,
    pub components: Vec<ScoreComponent>,
    pub sigma2: f64,
    pub options: FitOptions,
}

impl FittedModel {
    pub fn k(&self) -> usize {
        self.basis.k()
    }

    pub fn grid(&self) -> &GridSpec {
        &self.basis.grid
    }

    pub fn has_subject(&self, subject_id: &str) -> bool {
        self.components
            .first()
            .map(|c| c.has_subject(subject_id))
            .unwrap_or(false)
    }

    pub fn subjects(&self) -> Vec<&String> {
        self.components
            .first()
            .map(|c| c.subjects())
            .unwrap_or_default()
    }
}

/// Run the full pipeline: mean, marginal FPCA, per-component score models.
pub fn fit_model(train: &LFDataset, opts: &FitOptions) -> Result<FittedModel> {
    opts.validate()?;

    let mean_ctx = MeanFitContext {
        dims: opts.mean_dims,
        lambda_pairs: opts.lambda_pairs(),
        lambda_grid: opts.lambda_grid.clone(),
    };
    let mean = mean_model(&opts.mean_model)?
        .fit(train, &mean_ctx)
        .map_err(|e| Error::fit("mean", e.to_string()))?;

    let demeaned = train
        .demean(&mean)
        .map_err(|e| Error::fit("mean", e.to_string()))?;

    let raw = pooled_raw_covariance(&demeaned);
    let (_, psd) = smooth_and_truncate(&raw, train.grid(), opts.cov_dim, &opts.lambda_grid)
        .map_err(|e| Error::fit("marginal-fpca", e.to_string()))?;
    let basis = eigenbasis(&psd, train.grid(), opts.pve)
        .map_err(|e| Error::fit("marginal-fpca", e.to_string()))?;
    let sigma2 = estimate_white_noise(&raw, &psd, train.grid(), opts.trim).sigma2;

    let scores = project_scores(&demeaned, &basis)
        .map_err(|e| Error::fit("longitudinal-fpca", e.to_string()))?;
    let time_grid = GridSpec::equispaced(opts.time_grid_len)
        .map_err(|e| Error::fit("longitudinal-fpca", e.to_string()))?;
    let ctx = ScoreFitContext {
        time_grid,
        pve: opts.pve,
        np_options: NonparametricOptions {
            cov_dim: opts.cov_dim,
            diag_dim: opts.cov_dim,
            lambda_grid: opts.lambda_grid.clone(),
            trim: opts.trim,
        },
    };
    let strategy = score_model(&opts.score_model)?;
    let mut components = Vec::with_capacity(basis.k());
    for per_k in &scores {
        let component = strategy
            .fit(per_k, &ctx)
            .map_err(|e| Error::fit("longitudinal-fpca", format!("component {}: {e}", per_k.k)))?;
        components.push(component);
    }

    Ok(FittedModel {
        mean,
        basis,
        components,
        sigma2,
        options: opts.clone(),
    })
}

/// Versioned on-disk wrapper for a fitted model.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub library_version: String,
    pub model: FittedModel,
}

/// Persist a model as versioned JSON.
pub fn save_model(model: &FittedModel, path: impl AsRef<Path>) -> Result<()> {
    let file = ModelFile {
        schema_version: SCHEMA_VERSION,
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        model: model.clone(),
    };
    let writer = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(writer, &file)?;
    Ok(())
}

/// Load a model, rejecting unknown schema versions.
pub fn load_model(path: impl AsRef<Path>) -> Result<FittedModel> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let file: ModelFile = serde_json::from_reader(reader)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Error::ModelFile(format!(
            "schema version {} not supported (expected {})",
            file.schema_version, SCHEMA_VERSION
        )));
    }
    Ok(file.model)
}
