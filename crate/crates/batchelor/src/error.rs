//! Error type shared by the simulation and analysis modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("negative duration: t_from={t_from} > t_to={t_to}")]
    NegativeDuration { t_from: f64, t_to: f64 },

    #[error("evolution target {t_target} precedes current time {t_now}")]
    TimeReversal { t_target: f64, t_now: f64 },

    #[error("grid exceeds the database window")]
    GridOutsideWindow,

    #[error("contour rejected: {0}")]
    ContourRejected(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("insufficient counts in fit window: have {have}, need {need}")]
    InsufficientCounts { have: usize, need: usize },

    #[error("insufficient ensemble: have {have}, need {need}")]
    InsufficientEnsemble { have: usize, need: usize },

    #[error("capacity stopped increasing at step {step} (numerical breakdown)")]
    CapacityBreakdown { step: usize },

    #[error("non-finite trace point at step {step}; driving steps too coarse")]
    TraceDiverged { step: usize },

    #[error("histogram requires positive values, got {0}")]
    NonPositiveValue(f64),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    MalformedFile(String),
}
