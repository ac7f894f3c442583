//! Forward and backward passes through one branch: a stack of
//! convolution → batch norm → ReLU layers.
//!
//! Caches keep only the pre-normalisation convolution output of each layer;
//! the layer activations are recomputed from it during the backward pass.

use super::{BranchParams, BranchGrads, BranchSpec, NetworkError, Plane, INPUT_CHANNELS};
use crate::nn::{bn_backward_raw, bn_train_raw, BatchNormGrads, BatchStats, ConvGrads, LayerError, Mode, BN_EPSILON};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct LayerCache {
    /// Convolution output `[N, C, D, H, W]` before normalisation.
    z: Vec<f64>,
    dims: [usize; 3],
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

/// State saved by a branch forward pass for its backward pass.
#[derive(Debug, Clone)]
pub struct BranchCache {
    plane: Plane,
    mode: Mode,
    samples: usize,
    in_dims: [usize; 3],
    input: Vec<f64>,
    layers: Vec<LayerCache>,
    stats: Vec<BatchStats>,
}

impl BranchCache {
    /// Per-layer batch statistics (empty in eval mode).
    pub fn stats(&self) -> &[BatchStats] {
        &self.stats
    }
}

pub(crate) struct BranchRun {
    pub output: Vec<f64>,
    pub out_dims: [usize; 3],
    pub stats: Vec<BatchStats>,
    pub cache: Option<BranchCache>,
}

/// `relu(γ·(z − μ)·s + β)` per channel, written into `out`.
#[allow(clippy::too_many_arguments)]
fn activate(z: &[f64], n: usize, c: usize, p: usize, mean: &[f64], inv_std: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) {
    for s in 0..n {
        for ch in 0..c {
            let range = (s * c + ch) * p..(s * c + ch + 1) * p;
            let (m, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for (o, &v) in out[range.clone()].iter_mut().zip(&z[range]) {
                *o = (g * (v - m) * is + b).max(0.0);
            }
        }
    }
}

fn eval_stats(params: &BranchParams, layer: usize) -> (Vec<f64>, Vec<f64>) {
    let norm = &params.norms[layer];
    let mean = norm.running_mean.data().to_vec();
    let inv_std = norm.running_var.data().iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    (mean, inv_std)
}

/// Runs the branch over `samples` inputs laid out `[N, 2, D, H, W]`
/// (`D = 1` for in-plane branches).
pub(crate) fn run_branch(
    spec: &BranchSpec,
    params: &BranchParams,
    input: &[f64],
    samples: usize,
    in_dims: [usize; 3],
    mode: Mode,
    keep_cache: bool,
) -> Result<BranchRun, NetworkError> {
    let mut layers = Vec::new();
    let mut stats = Vec::new();
    let mut dims = in_dims;
    let mut current: Option<Vec<f64>> = None;
    for (l, layer) in spec.layers.iter().enumerate() {
        let engine = layer.engine();
        let out_dims = engine.output_dims(dims).ok_or_else(|| LayerError::InputTooSmall {
            dims: dims.to_vec(),
            dilation: layer.dilation(),
        })?;
        let x = current.as_deref().unwrap_or(input);
        let conv = &params.convs[l];
        let z = engine.forward(x, samples, dims, conv.weight.data(), conv.bias.data());
        drop(current.take());
        let (c, p) = (layer.out_channels(), out_dims.iter().product::<usize>());
        let norm = &params.norms[l];
        let mut a = vec![0.0; z.len()];
        let (mean, inv_std) = match mode {
            Mode::Train => {
                if samples * p <= 1 {
                    return Err(LayerError::BatchTooSmall(samples * p).into());
                }
                let (batch, inv_std) = bn_train_raw(&z, samples, c, p, norm.gamma.data(), norm.beta.data(), &mut a);
                for v in a.iter_mut() {
                    *v = v.max(0.0);
                }
                let mean = batch.mean.clone();
                stats.push(batch);
                (mean, inv_std)
            }
            Mode::Eval => {
                let (mean, inv_std) = eval_stats(params, l);
                activate(&z, samples, c, p, &mean, &inv_std, norm.gamma.data(), norm.beta.data(), &mut a);
                (mean, inv_std)
            }
        };
        if keep_cache {
            layers.push(LayerCache {
                z,
                dims: out_dims,
                mean,
                inv_std,
            });
        }
        current = Some(a);
        dims = out_dims;
    }
    let cache = keep_cache.then(|| BranchCache {
        plane: spec.plane,
        mode,
        samples,
        in_dims,
        input: input.to_vec(),
        layers,
        stats: stats.clone(),
    });
    Ok(BranchRun {
        output: current.unwrap_or_else(|| input.to_vec()),
        out_dims: dims,
        stats,
        cache,
    })
}

/// Backward pass consuming `cache`. `grad_out` is w.r.t. the branch output.
pub(crate) fn backprop_branch(
    spec: &BranchSpec,
    params: &BranchParams,
    mut cache: BranchCache,
    grad_out: Vec<f64>,
    want_input_grad: bool,
) -> Result<(BranchGrads, Option<Vec<f64>>), NetworkError> {
    let n = cache.samples;
    let mut grad = grad_out;
    let mut convs = Vec::with_capacity(spec.layers.len());
    let mut norms = Vec::with_capacity(spec.layers.len());
    for l in (0..spec.layers.len()).rev() {
        let layer = &spec.layers[l];
        let lc = cache.layers.pop().expect("one cache entry per layer");
        let (c, p) = (layer.out_channels(), lc.dims.iter().product::<usize>());
        let norm = &params.norms[l];
        let (gamma, beta) = (norm.gamma.data(), norm.beta.data());
        // ReLU mask from the recomputed pre-activation.
        for s in 0..n {
            for ch in 0..c {
                let range = (s * c + ch) * p..(s * c + ch + 1) * p;
                let (m, is, g, b) = (lc.mean[ch], lc.inv_std[ch], gamma[ch], beta[ch]);
                for (d, &v) in grad[range.clone()].iter_mut().zip(&lc.z[range]) {
                    if g * (v - m) * is + b <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }
        let (dz, dgamma, dbeta) = bn_backward_raw(&lc.z, &grad, n, c, p, &lc.mean, &lc.inv_std, gamma, cache.mode);
        drop(lc);
        drop(grad);
        norms.push(BatchNormGrads {
            gamma: Tensor::from_vec(&[c], dgamma)?,
            beta: Tensor::from_vec(&[c], dbeta)?,
        });

        let recomputed;
        let (x, x_dims): (&[f64], [usize; 3]) = if l == 0 {
            (&cache.input, cache.in_dims)
        } else {
            let prev = cache.layers.last().expect("previous layer cached");
            let pl = &params.norms[l - 1];
            let pc = spec.layers[l - 1].out_channels();
            let pp = prev.dims.iter().product::<usize>();
            let mut a = vec![0.0; prev.z.len()];
            activate(&prev.z, n, pc, pp, &prev.mean, &prev.inv_std, pl.gamma.data(), pl.beta.data(), &mut a);
            recomputed = a;
            (&recomputed, prev.dims)
        };
        let conv = &params.convs[l];
        let back = layer
            .engine()
            .backward(x, n, x_dims, conv.weight.data(), &dz, l > 0 || want_input_grad);
        convs.push(ConvGrads {
            weight: Tensor::from_vec(conv.weight.dims(), back.grad_weight)?,
            bias: Tensor::from_vec(conv.bias.dims(), back.grad_bias)?,
        });
        grad = back.grad_input.unwrap_or_default();
    }
    convs.reverse();
    norms.reverse();
    let grad_input = want_input_grad.then_some(grad);
    Ok((BranchGrads { convs, norms }, grad_input))
}

fn input_layout(spec: &BranchSpec, input: &Tensor) -> Result<(usize, [usize; 3]), NetworkError> {
    let dims = input.dims();
    let rank = if spec.is_volumetric() { 5 } else { 4 };
    if dims.len() != rank {
        return Err(LayerError::BadRank {
            expected: rank,
            got: dims.len(),
        }
        .into());
    }
    if dims[1] != INPUT_CHANNELS {
        return Err(LayerError::ChannelMismatch {
            expected: INPUT_CHANNELS,
            got: dims[1],
        }
        .into());
    }
    let spatial = if spec.is_volumetric() {
        [dims[2], dims[3], dims[4]]
    } else {
        [1, dims[2], dims[3]]
    };
    Ok((dims[0], spatial))
}

fn spatial_shape(spec: &BranchSpec, n: usize, c: usize, dims: [usize; 3]) -> Vec<usize> {
    let mut shape = vec![n, c];
    if spec.is_volumetric() {
        shape.extend_from_slice(&dims);
    } else {
        shape.extend_from_slice(&dims[1..]);
    }
    shape
}

/// Runs one branch on `[N, 2, H, W]` (in-plane) or `[N, 2, D, H, W]`
/// (volumetric) input of any sufficient size. Train mode uses batch
/// statistics but leaves the running estimates in `params` untouched; they
/// are available from [`BranchCache::stats`].
pub fn branch_forward(
    spec: &BranchSpec,
    params: &BranchParams,
    input: &Tensor,
    mode: Mode,
) -> Result<(Tensor, BranchCache), NetworkError> {
    let (n, in_dims) = input_layout(spec, input)?;
    if !input.is_finite() {
        return Err(LayerError::NonFiniteInput("branch").into());
    }
    let run = run_branch(spec, params, input.data(), n, in_dims, mode, true)?;
    let shape = spatial_shape(spec, n, spec.layers.last().map_or(INPUT_CHANNELS, |l| l.out_channels()), run.out_dims);
    Ok((Tensor::from_vec(&shape, run.output)?, run.cache.expect("cache requested")))
}

/// Gradients of the branch parameters and of its input.
pub fn branch_backward(
    spec: &BranchSpec,
    params: &BranchParams,
    cache: BranchCache,
    grad_out: &Tensor,
) -> Result<(Tensor, BranchGrads), NetworkError> {
    if cache.plane != spec.plane || cache.layers.len() != spec.layers.len() {
        return Err(NetworkError::GradShape {
            expected: vec![spec.layers.len()],
            got: vec![cache.layers.len()],
        });
    }
    let out_dims = cache.layers.last().map_or(cache.in_dims, |l| l.dims);
    let c = spec.layers.last().map_or(INPUT_CHANNELS, |l| l.out_channels());
    let expected = spatial_shape(spec, cache.samples, c, out_dims);
    if grad_out.dims() != expected.as_slice() {
        return Err(NetworkError::GradShape {
            expected,
            got: grad_out.dims().to_vec(),
        });
    }
    let in_shape = spatial_shape(spec, cache.samples, INPUT_CHANNELS, cache.in_dims);
    let (grads, grad_input) = backprop_branch(spec, params, cache, grad_out.data().to_vec(), true)?;
    Ok((Tensor::from_vec(&in_shape, grad_input.expect("requested"))?, grads))
}
