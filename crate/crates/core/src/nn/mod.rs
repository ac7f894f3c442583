//! Layer forward/backward passes.
//!
//! Convolutions are valid-mode. Batch norm normalises over the batch and all
//! spatial axes of `[N, C, ...]` inputs. Dropout is inverted dropout.

mod activation;
mod batchnorm;
mod conv;
mod dropout;
pub(crate) mod gemm;
pub(crate) mod loss;

pub use activation::{relu_backward, relu_forward};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormGrads, BatchNormParams, BatchStats,
    BN_EPSILON, BN_MOMENTUM,
};
pub(crate) use batchnorm::{bn_backward_raw, bn_train_raw};
pub use conv::{
    conv2d_backward, conv2d_forward, conv3d_backward, conv3d_forward, Conv2dSpec, Conv3dSpec, ConvGrads,
    ConvParams,
};
pub(crate) use conv::ConvEngine;
pub use dropout::{dropout_backward, dropout_forward};
pub use loss::{softmax_ce, softmax_rows};

use thiserror::Error;

use crate::tensor::TensorError;

/// Whether layers use batch statistics and active dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error("input extents {dims:?} too small for dilation {dilation}")]
    InputTooSmall { dims: Vec<usize>, dilation: usize },
    #[error("expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("expected rank {expected} (or batched), got {got}")]
    BadRank { expected: usize, got: usize },
    #[error("batch statistics need more than one element per channel, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("label {label} at row {row} outside 0..{classes}")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
