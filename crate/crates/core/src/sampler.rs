//! Class-balanced voxel sampling and patch extraction.
//!
//! Each sample is centred on one voxel: three in-plane patches (axial,
//! coronal, sagittal) of the in-plane receptive field and, for the combined
//! variant, a cube of the volumetric receptive field. Out-of-volume reads
//! mirror at the border (see [`reflect`]).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::network::{BranchSpec, Plane, INPUT_CHANNELS};
use crate::tensor::Tensor;
use crate::volume::{reflect, Volume, CLASS_NAMES};

pub const FULL_SAMPLES_PER_CLASS: usize = 50_000;
pub const FULL_EPOCHS: usize = 10;
pub const DESK_SAMPLES_PER_CLASS: usize = 2_000;
pub const DEFAULT_BATCH_SIZE: usize = 300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("image {image} has no label map")]
    Unlabelled { image: usize },
    #[error("image {image} has no {class} voxels under its mask")]
    MissingClass { image: usize, class: &'static str },
    #[error("no training images")]
    NoImages,
    #[error("batch size must be at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("samples per class and epochs must be positive")]
    EmptyPlan,
}

/// Where a sample was drawn: image index and `[z, y, x]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleCoord {
    pub image: usize,
    pub voxel: [usize; 3],
}

/// One entry of the sample stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedSample {
    pub coord: SampleCoord,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochPlan {
    pub samples_per_class: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl EpochPlan {
    pub fn full(seed: u64) -> Self {
        Self {
            samples_per_class: FULL_SAMPLES_PER_CLASS,
            epochs: FULL_EPOCHS,
            seed,
        }
    }

    /// Same epochs as [`EpochPlan::full`], far fewer samples.
    pub fn desk(seed: u64) -> Self {
        Self {
            samples_per_class: DESK_SAMPLES_PER_CLASS,
            ..Self::full(seed)
        }
    }
}

/// A batch of patches, `[N, 2, P, P]` per plane and `[N, 2, Q, Q, Q]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// Axial, coronal, sagittal.
    pub planar: [Tensor; 3],
    pub volumetric: Option<Tensor>,
    pub labels: Vec<usize>,
    pub coords: Vec<SampleCoord>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The samples at `order`, in that order.
    pub fn select(&self, order: &[usize]) -> SampleBatch {
        let pick = |t: &Tensor| {
            let per = t.len() / self.len();
            let mut dims = t.dims().to_vec();
            dims[0] = order.len();
            let data = order.iter().flat_map(|&i| t.data()[i * per..(i + 1) * per].iter().copied()).collect();
            Tensor::from_vec(&dims, data).expect("consistent")
        };
        SampleBatch {
            planar: [0, 1, 2].map(|p| pick(&self.planar[p])),
            volumetric: self.volumetric.as_ref().map(pick),
            labels: order.iter().map(|&i| self.labels[i]).collect(),
            coords: order.iter().map(|&i| self.coords[i]).collect(),
        }
    }
}

/// One extracted sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[2, P, P]` per plane.
    pub planar: [Tensor; 3],
    /// `[2, Q, Q, Q]`.
    pub volumetric: Option<Tensor>,
    pub label: Option<u8>,
}

fn planar_size() -> usize {
    BranchSpec::planar(Plane::Axial).receptive_field()
}

fn volumetric_size() -> usize {
    BranchSpec::volumetric().receptive_field()
}

fn planar_index(volume: &Volume, plane: Plane, voxel: [usize; 3], i: usize, j: usize, half: usize) -> usize {
    let [d, h, w] = volume.dims();
    let [z, y, x] = voxel.map(|v| v as isize);
    let (a, b) = (i as isize - half as isize, j as isize - half as isize);
    match plane {
        Plane::Axial => volume.index(voxel[0], reflect(y + a, h), reflect(x + b, w)),
        Plane::Coronal => volume.index(reflect(z + a, d), voxel[1], reflect(x + b, w)),
        Plane::Sagittal => volume.index(reflect(z + a, d), reflect(y + b, h), voxel[2]),
        Plane::Volumetric => unreachable!("not an in-plane branch"),
    }
}

/// Fills `out` (`[2, P, P]`) with the patch of `plane` centred on `voxel`.
pub(crate) fn fill_planar(volume: &Volume, plane: Plane, voxel: [usize; 3], out: &mut [f64]) {
    let p = planar_size();
    let half = p / 2;
    for c in 0..INPUT_CHANNELS {
        let src = volume.channel(c).data();
        for i in 0..p {
            for j in 0..p {
                out[(c * p + i) * p + j] = src[planar_index(volume, plane, voxel, i, j, half)];
            }
        }
    }
}

/// Fills `out` (`[2, Q, Q, Q]`) with the cube centred on `voxel`.
pub(crate) fn fill_volumetric(volume: &Volume, voxel: [usize; 3], out: &mut [f64]) {
    let q = volumetric_size();
    let half = (q / 2) as isize;
    let [d, h, w] = volume.dims();
    let [z, y, x] = voxel.map(|v| v as isize);
    for c in 0..INPUT_CHANNELS {
        let src = volume.channel(c).data();
        for a in 0..q {
            let zz = reflect(z + a as isize - half, d);
            for b in 0..q {
                let yy = reflect(y + b as isize - half, h);
                let row = &mut out[((c * q + a) * q + b) * q..][..q];
                for (e, o) in row.iter_mut().enumerate() {
                    *o = src[volume.index(zz, yy, reflect(x + e as isize - half, w))];
                }
            }
        }
    }
}

/// Patches centred on `voxel`; `need_3d` adds the volumetric cube.
pub fn extract_sample(volume: &Volume, voxel: [usize; 3], need_3d: bool) -> Sample {
    let p = planar_size();
    let planar = Plane::PLANAR.map(|plane| {
        let mut buf = vec![0.0; INPUT_CHANNELS * p * p];
        fill_planar(volume, plane, voxel, &mut buf);
        Tensor::from_vec(&[INPUT_CHANNELS, p, p], buf).expect("valid dims")
    });
    let volumetric = need_3d.then(|| {
        let q = volumetric_size();
        let mut buf = vec![0.0; INPUT_CHANNELS * q * q * q];
        fill_volumetric(volume, voxel, &mut buf);
        Tensor::from_vec(&[INPUT_CHANNELS, q, q, q], buf).expect("valid dims")
    });
    let label = volume.labels().map(|l| l[volume.index(voxel[0], voxel[1], voxel[2])]);
    Sample {
        planar,
        volumetric,
        label,
    }
}

/// Masked voxel indices of each class, per image.
fn class_pools(volumes: &[Volume]) -> Result<Vec<[Vec<usize>; 3]>, SamplerError> {
    if volumes.is_empty() {
        return Err(SamplerError::NoImages);
    }
    volumes
        .iter()
        .enumerate()
        .map(|(image, v)| {
            let labels = v.labels().ok_or(SamplerError::Unlabelled { image })?;
            let mut pools: [Vec<usize>; 3] = Default::default();
            for (i, &l) in labels.iter().enumerate() {
                if let Some(pool) = pools.get_mut(l as usize) {
                    pool.push(i);
                }
            }
            for (c, pool) in pools.iter().enumerate() {
                if pool.is_empty() {
                    return Err(SamplerError::MissingClass {
                        image,
                        class: CLASS_NAMES[c],
                    });
                }
            }
            Ok(pools)
        })
        .collect()
}

/// The shuffled sample stream of one epoch: `samples_per_class` voxels per
/// class and image, drawn uniformly with replacement.
pub fn plan_epoch(volumes: &[Volume], plan: &EpochPlan, epoch: usize) -> Result<Vec<PlannedSample>, SamplerError> {
    if plan.samples_per_class == 0 || plan.epochs == 0 {
        return Err(SamplerError::EmptyPlan);
    }
    let pools = class_pools(volumes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(epoch as u64);
    let mut stream = Vec::with_capacity(volumes.len() * 3 * plan.samples_per_class);
    for (image, (volume, pools)) in volumes.iter().zip(&pools).enumerate() {
        for (label, pool) in pools.iter().enumerate() {
            for _ in 0..plan.samples_per_class {
                let index = pool[rng.random_range(0..pool.len())];
                stream.push(PlannedSample {
                    coord: SampleCoord {
                        image,
                        voxel: volume.coords(index),
                    },
                    label: label as u8,
                });
            }
        }
    }
    stream.shuffle(&mut rng);
    Ok(stream)
}

/// Consecutive chunks of `batch_size`; a short final chunk is dropped.
pub fn assemble_batches(stream: &[PlannedSample], batch_size: usize) -> Result<Vec<&[PlannedSample]>, SamplerError> {
    if batch_size < 2 {
        return Err(SamplerError::BatchTooSmall(batch_size));
    }
    Ok(stream.chunks_exact(batch_size).collect())
}

/// Extracts the patches of `samples` into a batch. Extraction runs in
/// parallel; sample order follows `samples`.
pub fn materialize(volumes: &[Volume], samples: &[PlannedSample], need_3d: bool) -> SampleBatch {
    let n = samples.len();
    let p = planar_size();
    let q = volumetric_size();
    let per_planar = INPUT_CHANNELS * p * p;
    let per_cube = INPUT_CHANNELS * q * q * q;
    let planar = Plane::PLANAR.map(|plane| {
        let mut buf = vec![0.0; n * per_planar];
        buf.par_chunks_mut(per_planar).zip(samples).for_each(|(out, s)| {
            fill_planar(&volumes[s.coord.image], plane, s.coord.voxel, out);
        });
        Tensor::from_vec(&[n, INPUT_CHANNELS, p, p], buf).expect("non-empty batch")
    });
    let volumetric = need_3d.then(|| {
        let mut buf = vec![0.0; n * per_cube];
        buf.par_chunks_mut(per_cube).zip(samples).for_each(|(out, s)| {
            fill_volumetric(&volumes[s.coord.image], s.coord.voxel, out);
        });
        Tensor::from_vec(&[n, INPUT_CHANNELS, q, q, q], buf).expect("non-empty batch")
    });
    SampleBatch {
        planar,
        volumetric,
        labels: samples.iter().map(|s| s.label as usize).collect(),
        coords: samples.iter().map(|s| s.coord).collect(),
    }
}
