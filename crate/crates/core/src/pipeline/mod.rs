//! Training, whole-volume segmentation and evaluation.

mod evaluate;
mod preview;
mod segment;
mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use evaluate::{evaluate_dice, DiceReport};
pub use preview::{emit_slice_previews, PALETTE};
pub use segment::{segment, SegmentationResult};
pub use train::{train, train_from, train_step, TrainConfig, TrainOutcome};

use crate::kv::KvError;
use crate::network::NetworkError;
use crate::optim::OptimError;
use crate::sampler::SamplerError;
use crate::volume::VolumeError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error("epoch stream of {stream} samples yields no batch of {batch_size}")]
    NoBatches { stream: usize, batch_size: usize },
    #[error("{what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("dropout rate {0} outside [0, 1)")]
    BadDropout(f64),
    #[error("failed to write {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Config(#[from] KvError),
}
