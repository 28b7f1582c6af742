//! Character metrics through a frozen multi-label classifier, a Fréchet
//! distance over its features, and the story-continuation filter.

mod classifier;
mod frechet;
mod metrics;

pub use classifier::{train_classifier, CharClassifier, ClassifierConfig, ClassifierStats, F1_GATE};
pub use frechet::{covariance, frechet_distance, frechet_feature_distance, sqrtm_psd, COV_REGULARIZER};
pub use metrics::{char_metrics, evaluate_frames, story_continuation_filter, CharCounts, MetricsReport};

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::numeric::NumericError;
use crate::vq::VqError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {what} has {found}, expected {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("classifier held-out F1 {f1:.4} is below the {gate} gate; metrics refused")]
    GateUnmet { f1: f64, gate: f64 },
    #[error("classifier has not been validated on held-out frames")]
    Unvalidated,
    #[error("need at least {needed} feature rows, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("matrix square root did not converge (residual {residual:.3e})")]
    NoConvergence { residual: f64 },
    #[error("story continuation needs at least 2 frames, story {index} has {found}")]
    ShortStory { index: usize, found: usize },
    #[error("invalid classifier config: {0}")]
    Config(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Vq(#[from] VqError),
}

pub type Result<T> = std::result::Result<T, EvalError>;
