//! Longitudinal functional data analysis.
//!
//! Curves observed repeatedly per subject at sparse visit times are modeled
//! as `Y_ij(s) = mu(s, T_ij) + sum_k xi_ik(T_ij) phi_k(s) + noise`: a
//! time-invariant eigenbasis `phi_k` extracted from the marginal covariance
//! of the pooled curves, with per-component score processes `xi_ik(T)`
//! modeled over visit time. The fitted model predicts a subject's full curve
//! at any time, including future visits.
//!
//! Pipeline: penalized tensor-product mean fit, marginal FPCA of the pooled
//! demeaned covariance (diagonal removed, PSD-truncated), quadrature
//! projection to per-component scores, then either sparse FPCA with BLUP
//! score prediction or a random intercept/slope model per component. A
//! simulation harness, accuracy metrics, and a bootstrap slope test round
//! out the crate.

pub mod dataset;
pub mod error;
pub mod inference;
pub mod longitudinal;
pub mod marginal;
pub mod mean;
pub mod model;
pub mod numerics;
pub mod prediction;
pub mod registry;
pub mod simulation;
pub mod smoothing;
pub mod splines;

pub use dataset::{load_csv, split_last_visit, write_csv, GridSpec, LFDataset, TrainTestSplit, Visit};
pub use error::{Error, Result};
pub use inference::{bootstrap_slope_band, bootstrap_slope_test, slope_statistic};
pub use marginal::EigenBasis;
pub use mean::MeanSurface;
pub use model::{fit_model, load_model, save_model, FitOptions, FittedModel};
pub use prediction::{naive_predict, reconstruct};
pub use registry::{mean_model, score_model, ScoreComponent};
pub use simulation::{run_experiment, ScenarioConfig, XiModel};
