//! Small CNN engine: 3x3 valid convolutions, 2x2 max-pooling, dense layers,
//! ReLU and a softmax head trained with categorical cross-entropy and SGD.
//!
//! Activations are NHWC `f32`. Training is single-threaded so a seed fully
//! determines the resulting weights.

mod arch;
mod model;
mod train;

use thiserror::Error;

pub use arch::{param_count, preset, ArchitectureSpec, LayerSpec, Shape, KERNEL, PRESET_IDS};
pub use model::{
    cross_entropy_from_logits, init_weights, softmax, softmax_cross_entropy_grad, EpochLog,
    Gradients, Normalization, TrainedModel,
};
pub use train::{count_correct, evaluate, predict, predict_proba, train, write_log_csv, Labeled, TrainConfig};

use crate::augment::AugmentError;
use crate::image_ops::ImageError;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("architecture {0} has no single conv + hidden dense pair to reduce")]
    NonReducibleArchitecture(String),
    #[error("unknown architecture preset {0:?}")]
    UnknownPreset(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss became NaN at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("empty split")]
    EmptySplit,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Image(#[from] ImageError),
}
