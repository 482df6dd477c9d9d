//! Data plumbing around the model: wind transport predictors, predictor
//! scaling, cross-validation, the synthetic fence-line fixture and run
//! manifests.

mod cv;
mod fixture;
mod manifest;
mod scaling;
mod transport;

pub use cv::{assign_folds, cross_validate, CvReport, FoldScore};
pub use fixture::{fence_line_fixture, FenceLineFixture, FIXTURE_PERIODS, FIXTURE_SITES};
pub use manifest::{config_hash, content_hash, FileDigest, RunManifest};
pub use scaling::{scale_predictors, Scaling};
pub use transport::{
    compute_transport, format_timestamp, parse_timestamp, read_schedule_csv, read_wind_csv, write_schedule_csv,
    write_wind_csv, SourceGeometry, TransportTable, WindObservation, WindPeriod, WindSeries, HOURS_PER_PERIOD,
};

use thiserror::Error;

use crate::inference::{DataError, InferenceError};
use crate::scoring::ScoringError;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("invalid wind data: {0}")]
    Wind(String),
    #[error("invalid deployment schedule: {0}")]
    Schedule(String),
    #[error("cannot parse timestamp `{0}`")]
    Timestamp(String),
    #[error("predictor x{column} is constant and cannot be scaled")]
    DegenerateScale { column: usize },
    #[error("cannot split {n} rows into {folds} folds")]
    Folds { n: usize, folds: usize },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
