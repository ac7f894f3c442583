//! Fully-convolutional inference over a whole volume.
//!
//! Each branch is run once over a reflect-padded slab, so every output voxel
//! sees exactly the patch the sampler would have cut for it. The classifier
//! is linear, so its logits are accumulated branch by branch.

use rayon::prelude::*;

use super::PipelineError;
use crate::network::branch::run_branch;
use crate::network::{BranchSpec, ModelParams, Plane, BRANCH_WIDTH, INPUT_CHANNELS, NUM_CLASSES};
use crate::nn::loss::softmax_in_place;
use crate::nn::Mode;
use crate::tensor::Tensor;
use crate::volume::{reflect, Volume, BACKGROUND};

/// Upper bound on one branch activation buffer.
const ACTIVATION_BUDGET: usize = 128 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    /// `[3, D, H, W]`; zero outside the mask.
    pub probabilities: Tensor,
    /// Arg-max class per voxel, [`BACKGROUND`] outside the mask.
    pub labels: Vec<u8>,
}

impl SegmentationResult {
    pub fn dims(&self) -> [usize; 3] {
        let d = self.probabilities.dims();
        [d[1], d[2], d[3]]
    }
}

/// Slice geometry of an in-plane branch: (fixed axis, row axis, col axis).
fn plane_axes(plane: Plane) -> (usize, usize, usize) {
    match plane {
        Plane::Axial => (0, 1, 2),
        Plane::Coronal => (1, 0, 2),
        Plane::Sagittal => (2, 0, 1),
        Plane::Volumetric => unreachable!("not an in-plane branch"),
    }
}

fn voxel_at(axes: (usize, usize, usize), s: usize, r: usize, c: usize) -> [usize; 3] {
    let mut v = [0; 3];
    v[axes.0] = s;
    v[axes.1] = r;
    v[axes.2] = c;
    v
}

/// Adds `W[:, offset..offset+32] · features` to the logits of each masked voxel.
fn accumulate(logits: &mut [f64], weight: &[f64], width: usize, offset: usize, features: &[f64], plane_len: usize, voxels: &[(usize, usize)]) {
    for &(pos, idx) in voxels {
        for (k, out) in logits[idx * NUM_CLASSES..][..NUM_CLASSES].iter_mut().enumerate() {
            let w = &weight[k * width + offset..][..BRANCH_WIDTH];
            *out += w.iter().enumerate().map(|(f, w)| w * features[f * plane_len + pos]).sum::<f64>();
        }
    }
}

fn planar_pass(volume: &Volume, params: &ModelParams, plane: Plane, offset: usize, logits: &mut [f64]) -> Result<(), PipelineError> {
    let spec = BranchSpec::planar(plane);
    let half = spec.receptive_field() / 2;
    let dims = volume.dims();
    let axes = plane_axes(plane);
    let (slices, rows, cols) = (dims[axes.0], dims[axes.1], dims[axes.2]);
    let (pr, pc) = (rows + 2 * half, cols + 2 * half);
    let plane_len = rows * cols;

    let mask = volume.mask();
    let active: Vec<usize> = (0..slices)
        .filter(|&s| (0..rows).any(|r| (0..cols).any(|c| mask[index(volume, voxel_at(axes, s, r, c))])))
        .collect();
    let chunk = (ACTIVATION_BUDGET / (pr * pc * BRANCH_WIDTH * 8)).clamp(1, 64);
    let weight = params.classifier().weight.data();
    let width = params.variant().classifier_inputs();

    for group in active.chunks(chunk) {
        let n = group.len();
        let mut input = vec![0.0; n * INPUT_CHANNELS * pr * pc];
        input.par_chunks_mut(pr * pc).enumerate().for_each(|(k, out)| {
            let (s, ch) = (group[k / INPUT_CHANNELS], k % INPUT_CHANNELS);
            let src = volume.channel(ch).data();
            for i in 0..pr {
                let r = reflect(i as isize - half as isize, rows);
                for j in 0..pc {
                    let c = reflect(j as isize - half as isize, cols);
                    out[i * pc + j] = src[index(volume, voxel_at(axes, s, r, c))];
                }
            }
        });
        let run = run_branch(&spec, params.planar_for(plane), &input, n, [1, pr, pc], Mode::Eval, false)?;
        debug_assert_eq!(run.out_dims, [1, rows, cols]);
        for (k, &s) in group.iter().enumerate() {
            let voxels: Vec<(usize, usize)> = (0..rows)
                .flat_map(|r| (0..cols).map(move |c| (r, c)))
                .filter_map(|(r, c)| {
                    let idx = index(volume, voxel_at(axes, s, r, c));
                    mask[idx].then_some((r * cols + c, idx))
                })
                .collect();
            let features = &run.output[k * BRANCH_WIDTH * plane_len..][..BRANCH_WIDTH * plane_len];
            accumulate(logits, weight, width, offset, features, plane_len, &voxels);
        }
    }
    Ok(())
}

fn volumetric_pass(volume: &Volume, params: &ModelParams, offset: usize, logits: &mut [f64]) -> Result<(), PipelineError> {
    let spec = BranchSpec::volumetric();
    let half = spec.receptive_field() / 2;
    let [d, h, w] = volume.dims();
    let (ph, pw) = (h + 2 * half, w + 2 * half);
    let slab = |bz: usize| (bz + 2 * half) * ph * pw * BRANCH_WIDTH * 8;
    let mut block = 16.min(d);
    while block > 1 && slab(block) > ACTIVATION_BUDGET {
        block /= 2;
    }
    let set = params.volumetric().expect("variant has a volumetric branch");
    let weight = params.classifier().weight.data();
    let width = params.variant().classifier_inputs();
    let mask = volume.mask();

    for z0 in (0..d).step_by(block) {
        let bz = block.min(d - z0);
        let voxels: Vec<(usize, usize)> = (0..bz * h * w)
            .filter_map(|pos| {
                let idx = z0 * h * w + pos;
                mask[idx].then_some((pos, idx))
            })
            .collect();
        if voxels.is_empty() {
            continue;
        }
        let pd = bz + 2 * half;
        let mut input = vec![0.0; INPUT_CHANNELS * pd * ph * pw];
        input.par_chunks_mut(ph * pw).enumerate().for_each(|(k, out)| {
            let (ch, a) = (k / pd, k % pd);
            let src = volume.channel(ch).data();
            let z = reflect((z0 + a) as isize - half as isize, d);
            for i in 0..ph {
                let y = reflect(i as isize - half as isize, h);
                for j in 0..pw {
                    out[i * pw + j] = src[volume.index(z, y, reflect(j as isize - half as isize, w))];
                }
            }
        });
        let run = run_branch(&spec, set, &input, 1, [pd, ph, pw], Mode::Eval, false)?;
        debug_assert_eq!(run.out_dims, [bz, h, w]);
        accumulate(logits, weight, width, offset, &run.output, bz * h * w, &voxels);
    }
    Ok(())
}

fn index(volume: &Volume, [z, y, x]: [usize; 3]) -> usize {
    volume.index(z, y, x)
}

/// Class probabilities and labels for every voxel of the brain mask, using
/// eval-mode batch norm.
pub fn segment(volume: &Volume, params: &ModelParams) -> Result<SegmentationResult, PipelineError> {
    let n = volume.len();
    let bias = params.classifier().bias.data();
    let mut logits: Vec<f64> = (0..n).flat_map(|_| bias.iter().copied()).collect();
    for (b, &plane) in Plane::PLANAR.iter().enumerate() {
        planar_pass(volume, params, plane, b * BRANCH_WIDTH, &mut logits)?;
    }
    if params.variant().has_volumetric() {
        volumetric_pass(volume, params, Plane::PLANAR.len() * BRANCH_WIDTH, &mut logits)?;
    }

    let mask = volume.mask();
    let mut probabilities = vec![0.0; NUM_CLASSES * n];
    let mut labels = vec![BACKGROUND; n];
    for i in (0..n).filter(|&i| mask[i]) {
        let row = &mut logits[i * NUM_CLASSES..][..NUM_CLASSES];
        softmax_in_place(row);
        let mut best = 0;
        for (k, &p) in row.iter().enumerate() {
            probabilities[k * n + i] = p;
            if p > row[best] {
                best = k;
            }
        }
        labels[i] = best as u8;
    }
    let [d, h, w] = volume.dims();
    Ok(SegmentationResult {
        probabilities: Tensor::from_vec(&[NUM_CLASSES, d, h, w], probabilities).expect("dims match the volume"),
        labels,
    })
}
