//! The four-branch segmentation network.
//!
//! Three in-plane branches (axial, coronal, sagittal) stack seven 3×3
//! convolutions with dilations 1, 1, 2, 4, 8, 16, 1; an optional volumetric
//! branch stacks twelve undilated 3×3×3 convolutions. Every convolution has
//! 32 kernels followed by batch norm and ReLU. Branch outputs are
//! concatenated, passed through dropout and classified by a pointwise
//! convolution into three tissue classes.

pub(crate) mod branch;
pub mod checkpoint;
mod forward;
mod params;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use branch::{branch_backward, branch_forward, BranchCache};
pub use forward::{backward_sample_batch, forward_sample_batch, predict_batch, ForwardCache, Pass, RunningStats};
pub use params::{build, count_parameters, BranchGrads, BranchParams, ModelGrads, ModelParams};

use crate::nn::{Conv2dSpec, Conv3dSpec, LayerError};
use crate::tensor::TensorError;

/// Dilation factors of the in-plane branches, first layer to last.
pub const PLANAR_DILATIONS: [usize; 7] = [1, 1, 2, 4, 8, 16, 1];
/// Number of 3×3×3 layers in the volumetric branch.
pub const VOLUMETRIC_DEPTH: usize = 12;
/// Kernels per convolution layer in every branch.
pub const BRANCH_WIDTH: usize = 32;
/// T1- and T2-weighted intensities.
pub const INPUT_CHANNELS: usize = 2;
/// CSF, GM, WM.
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("{plane} patches must be {expected:?}, got {got:?}")]
    WrongPatchSize {
        plane: Plane,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("variant {0} needs volumetric patches but the batch has none")]
    MissingVolumetric(NetworkVariant),
    #[error("forward cache was built at parameter revision {cached}, parameters are now at {current}")]
    StaleCache { cached: u64, current: u64 },
    #[error("gradient shape {got:?} does not match logits {expected:?}")]
    GradShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetworkVariant {
    /// One parameter set used by all three in-plane branches.
    TriplanarShared,
    /// Independent parameters per plane.
    TriplanarSeparate,
    /// Separate in-plane branches plus the volumetric branch.
    CombinedTriplanar3D,
}

impl NetworkVariant {
    pub const ALL: [NetworkVariant; 3] = [
        NetworkVariant::TriplanarShared,
        NetworkVariant::TriplanarSeparate,
        NetworkVariant::CombinedTriplanar3D,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetworkVariant::TriplanarShared => "triplanar-shared",
            NetworkVariant::TriplanarSeparate => "triplanar-separate",
            NetworkVariant::CombinedTriplanar3D => "combined",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            NetworkVariant::TriplanarShared => 1,
            NetworkVariant::TriplanarSeparate => 2,
            NetworkVariant::CombinedTriplanar3D => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }

    pub fn has_volumetric(self) -> bool {
        self == NetworkVariant::CombinedTriplanar3D
    }

    pub fn shares_planar_weights(self) -> bool {
        self == NetworkVariant::TriplanarShared
    }

    pub fn branch_count(self) -> usize {
        if self.has_volumetric() {
            4
        } else {
            3
        }
    }

    /// Width of the concatenated feature vector fed to the classifier.
    pub fn classifier_inputs(self) -> usize {
        BRANCH_WIDTH * self.branch_count()
    }

    pub fn branches(self) -> Vec<BranchSpec> {
        let mut specs: Vec<BranchSpec> = Plane::PLANAR.iter().map(|&p| BranchSpec::planar(p)).collect();
        if self.has_volumetric() {
            specs.push(BranchSpec::volumetric());
        }
        specs
    }
}

impl fmt::Display for NetworkVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NetworkVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (expected triplanar-shared, triplanar-separate or combined)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Plane {
    /// Fixed z; rows y, columns x.
    Axial,
    /// Fixed y; rows z, columns x.
    Coronal,
    /// Fixed x; rows z, columns y.
    Sagittal,
    Volumetric,
}

impl Plane {
    pub const PLANAR: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
            Plane::Volumetric => "volumetric",
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Planar(Conv2dSpec),
    Volumetric(Conv3dSpec),
}

impl LayerSpec {
    pub fn in_channels(&self) -> usize {
        match self {
            LayerSpec::Planar(s) => s.in_channels,
            LayerSpec::Volumetric(s) => s.in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            LayerSpec::Planar(s) => s.out_channels,
            LayerSpec::Volumetric(s) => s.out_channels,
        }
    }

    pub fn dilation(&self) -> usize {
        match self {
            LayerSpec::Planar(s) => s.dilation,
            LayerSpec::Volumetric(_) => 1,
        }
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        match self {
            LayerSpec::Planar(s) => s.weight_dims().to_vec(),
            LayerSpec::Volumetric(s) => s.weight_dims().to_vec(),
        }
    }

    /// Kernel taps per input channel (9 or 27).
    pub fn taps(&self) -> usize {
        match self {
            LayerSpec::Planar(_) => 9,
            LayerSpec::Volumetric(_) => 27,
        }
    }

    pub(crate) fn engine(&self) -> crate::nn::ConvEngine {
        match self {
            LayerSpec::Planar(s) => s.engine(),
            LayerSpec::Volumetric(s) => s.engine(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchSpec {
    pub plane: Plane,
    pub layers: Vec<LayerSpec>,
}

impl BranchSpec {
    pub fn planar(plane: Plane) -> Self {
        assert_ne!(plane, Plane::Volumetric, "use BranchSpec::volumetric");
        Self::planar_with(plane, &PLANAR_DILATIONS)
    }

    /// An in-plane branch with arbitrary dilations (32 kernels per layer).
    pub fn planar_with(plane: Plane, dilations: &[usize]) -> Self {
        let layers = dilations
            .iter()
            .enumerate()
            .map(|(i, &dilation)| {
                LayerSpec::Planar(Conv2dSpec {
                    in_channels: if i == 0 { INPUT_CHANNELS } else { BRANCH_WIDTH },
                    out_channels: BRANCH_WIDTH,
                    dilation,
                })
            })
            .collect();
        Self { plane, layers }
    }

    pub fn volumetric() -> Self {
        Self::volumetric_with(VOLUMETRIC_DEPTH)
    }

    pub fn volumetric_with(depth: usize) -> Self {
        let layers = (0..depth)
            .map(|i| {
                LayerSpec::Volumetric(Conv3dSpec {
                    in_channels: if i == 0 { INPUT_CHANNELS } else { BRANCH_WIDTH },
                    out_channels: BRANCH_WIDTH,
                })
            })
            .collect();
        Self {
            plane: Plane::Volumetric,
            layers,
        }
    }

    pub fn is_volumetric(&self) -> bool {
        self.plane == Plane::Volumetric
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self)
    }

    /// Spatial extent of the patch this branch maps to a single output voxel,
    /// per axis of its input (`[P, P]` or `[P, P, P]`).
    pub fn patch_dims(&self) -> Vec<usize> {
        let rf = self.receptive_field();
        if self.is_volumetric() {
            vec![rf; 3]
        } else {
            vec![rf; 2]
        }
    }

    /// Spatial output extents for each layer given an input extent per axis.
    pub fn layer_extents(&self, input: usize) -> Vec<Option<usize>> {
        let mut size = Some(input);
        self.layers
            .iter()
            .map(|l| {
                size = size.and_then(|s| s.checked_sub(2 * l.dilation())).filter(|&s| s > 0);
                size
            })
            .collect()
    }
}

/// Input extent along one axis that influences a single output voxel:
/// `1 + Σ (k − 1)·dᵢ` with `k = 3`.
pub fn receptive_field(branch: &BranchSpec) -> usize {
    1 + branch.layers.iter().map(|l| 2 * l.dilation()).sum::<usize>()
}
