//! Bayesian fitting of the quantile model by adaptive Metropolis sampling.

mod adapt;
mod config;
mod dataset;
mod likelihood;
mod mcmc;
mod optimize;
mod prior;
mod samples;

pub use adapt::{AdaptiveProposal, TARGET_MULTI, TARGET_SCALAR};
pub use config::{BasisConfig, FitConfig, McmcConfig, PriorConfig};
pub use dataset::{fmt_f64, DataError, Dataset, TRAIN_FOLD, VALIDATION_FOLD};
pub use likelihood::log_likelihood;
pub use mcmc::mcmc_fit;
pub use prior::{log_prior, ParameterState, PriorSpec};
pub use samples::{
    beta_draws, posterior_summary, predictive_densities, predictive_density, read_curves_csv, summarize_draws,
    write_curves_csv, BlockAcceptance,
    CurvePoint, PosteriorSamples, SampleHeader, SampleLayout, DRAW_CONSTRAINT_TOL,
};

use thiserror::Error;

use crate::covariance::CovarianceError;
use crate::model::ModelError;
use crate::splines::SplineError;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Covariance(#[from] CovarianceError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no valid initial state after {attempts} attempts")]
    InitFailed { attempts: usize },
    #[error("no posterior draws")]
    EmptySamples,
    #[error("sample table does not match its header: {0}")]
    Schema(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
