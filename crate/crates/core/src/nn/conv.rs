//! Valid-mode (unpadded) convolutions: dilated 3×3 in-plane, 3×3×3 volumetric
//! and 1×1×1 pointwise.
//!
//! All three share one im2col engine. A 2D convolution is treated as a 3D one
//! with a depth-1 kernel over a depth-1 input, so the weight layout
//! `[C_out, C_in, 3, 3]` flattens to the same column order as
//! `[C_out, C_in, 1, 3, 3]`.
//!
//! Work is split into items of bounded column count so that the im2col buffer
//! stays small even for whole-volume inference. The split depends only on the
//! problem shape, never on the thread count, and partial weight gradients are
//! summed in item order, so results are bit-identical for any `--threads`.

use std::cell::RefCell;

use rayon::prelude::*;

use super::gemm::{matmul, Layout};
use super::LayerError;
use crate::tensor::Tensor;

/// Target number of im2col columns per work item.
const TARGET_COLS: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2dSpec {
    pub const KERNEL: usize = 3;

    pub(crate) fn engine(&self) -> ConvEngine {
        ConvEngine {
            geometry: ConvGeometry::planar(self.dilation),
            in_channels: self.in_channels,
            out_channels: self.out_channels,
        }
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, 3, 3]
    }
}

impl Conv3dSpec {
    pub const KERNEL: usize = 3;

    pub(crate) fn engine(&self) -> ConvEngine {
        ConvEngine {
            geometry: ConvGeometry::volumetric(),
            in_channels: self.in_channels,
            out_channels: self.out_channels,
        }
    }

    pub fn weight_dims(&self) -> [usize; 5] {
        [self.out_channels, self.in_channels, 3, 3, 3]
    }
}

/// Weights `[C_out, C_in, k...]` and bias `[C_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub kernel: [usize; 3],
    pub dilation: [usize; 3],
}

impl ConvGeometry {
    pub fn planar(dilation: usize) -> Self {
        Self {
            kernel: [1, 3, 3],
            dilation: [1, dilation, dilation],
        }
    }

    pub fn volumetric() -> Self {
        Self {
            kernel: [3, 3, 3],
            dilation: [1, 1, 1],
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Extent removed from each axis.
    pub fn shrink(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| (self.kernel[a] - 1) * self.dilation[a])
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let shrink = self.shrink();
        let mut out = [0; 3];
        for a in 0..3 {
            if input[a] <= shrink[a] {
                return None;
            }
            out[a] = input[a] - shrink[a];
        }
        Some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvEngine {
    pub geometry: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, Copy)]
struct WorkItem {
    sample_start: usize,
    samples: usize,
    row_start: usize,
    rows: usize,
}

pub(crate) struct ConvBackward {
    pub grad_input: Option<Vec<f64>>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

struct ItemGrads {
    weight: Vec<f64>,
    bias: Vec<f64>,
    col: Option<Vec<f64>>,
}

thread_local! {
    static COL_SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

fn with_col_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    COL_SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

fn plan(samples: usize, out: [usize; 3]) -> Vec<WorkItem> {
    let rows = out[0] * out[1];
    let per_sample = rows * out[2];
    let mut items = Vec::new();
    if per_sample >= TARGET_COLS {
        let chunks = per_sample.div_ceil(TARGET_COLS);
        let rows_per = rows.div_ceil(chunks);
        for s in 0..samples {
            let mut r = 0;
            while r < rows {
                let take = rows_per.min(rows - r);
                items.push(WorkItem {
                    sample_start: s,
                    samples: 1,
                    row_start: r,
                    rows: take,
                });
                r += take;
            }
        }
    } else {
        let group = (TARGET_COLS / per_sample).max(1);
        let mut s = 0;
        while s < samples {
            let take = group.min(samples - s);
            items.push(WorkItem {
                sample_start: s,
                samples: take,
                row_start: 0,
                rows,
            });
            s += take;
        }
    }
    items
}

fn wave_size() -> usize {
    rayon::current_num_threads().max(1)
}

impl ConvEngine {
    pub fn taps(&self) -> usize {
        self.geometry.taps()
    }

    pub fn kdim(&self) -> usize {
        self.in_channels * self.taps()
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        self.geometry.output_dims(input)
    }

    /// Fills `col` as `[K, cols]` for one work item.
    fn im2col(&self, input: &[f64], in_dims: [usize; 3], out: [usize; 3], item: WorkItem, col: &mut [f64]) {
        let [_, ih, iw] = in_dims;
        let in_vol = in_dims.iter().product::<usize>();
        let [kd, kh, kw] = self.geometry.kernel;
        let [dd, dh, dw] = self.geometry.dilation;
        let ow = out[2];
        let cols = item.samples * item.rows * ow;
        let mut r = 0;
        for c in 0..self.in_channels {
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let dst = &mut col[r * cols..(r + 1) * cols];
                        for s in 0..item.samples {
                            let base = ((item.sample_start + s) * self.in_channels + c) * in_vol;
                            for qi in 0..item.rows {
                                let q = item.row_start + qi;
                                let (z, y) = (q / out[1], q % out[1]);
                                let src = base + (z + kz * dd) * ih * iw + (y + ky * dh) * iw + kx * dw;
                                let d0 = (s * item.rows + qi) * ow;
                                dst[d0..d0 + ow].copy_from_slice(&input[src..src + ow]);
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    /// Scatter-adds a `[K, cols]` column gradient back into `grad_input`.
    fn col2im(&self, col: &[f64], in_dims: [usize; 3], out: [usize; 3], item: WorkItem, grad_input: &mut [f64]) {
        let [_, ih, iw] = in_dims;
        let in_vol = in_dims.iter().product::<usize>();
        let [kd, kh, kw] = self.geometry.kernel;
        let [dd, dh, dw] = self.geometry.dilation;
        let ow = out[2];
        let cols = item.samples * item.rows * ow;
        let mut r = 0;
        for c in 0..self.in_channels {
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let src_row = &col[r * cols..(r + 1) * cols];
                        for s in 0..item.samples {
                            let base = ((item.sample_start + s) * self.in_channels + c) * in_vol;
                            for qi in 0..item.rows {
                                let q = item.row_start + qi;
                                let (z, y) = (q / out[1], q % out[1]);
                                let dst = base + (z + kz * dd) * ih * iw + (y + ky * dh) * iw + kx * dw;
                                let s0 = (s * item.rows + qi) * ow;
                                for (g, v) in grad_input[dst..dst + ow].iter_mut().zip(&src_row[s0..s0 + ow]) {
                                    *g += v;
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    /// Copies between a sample-major `[N, C_out, P]` buffer and an item-local
    /// `[C_out, cols]` buffer.
    fn item_ranges(&self, out: [usize; 3], item: WorkItem) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let ow = out[2];
        let p_out = out.iter().product::<usize>();
        let len = item.rows * ow;
        let cols = item.samples * len;
        (0..item.samples).flat_map(move |s| {
            (0..self.out_channels).map(move |o| {
                let global = ((item.sample_start + s) * self.out_channels + o) * p_out + item.row_start * ow;
                let local = o * cols + s * len;
                (o, global, local, len)
            })
        })
    }

    /// Forward pass over `samples` inputs laid out `[N, C_in, D, H, W]`.
    pub fn forward(
        &self,
        input: &[f64],
        samples: usize,
        in_dims: [usize; 3],
        weight: &[f64],
        bias: &[f64],
    ) -> Vec<f64> {
        let out = self.output_dims(in_dims).expect("input checked by caller");
        let p_out = out.iter().product::<usize>();
        let k = self.kdim();
        let mut output = vec![0.0; samples * self.out_channels * p_out];
        let items = plan(samples, out);
        for wave in items.chunks(wave_size()) {
            let results: Vec<Vec<f64>> = wave
                .par_iter()
                .map(|&item| {
                    let cols = item.samples * item.rows * out[2];
                    let mut tmp = vec![0.0; self.out_channels * cols];
                    with_col_scratch(k * cols, |col| {
                        self.im2col(input, in_dims, out, item, col);
                        matmul(self.out_channels, k, cols, weight, Layout::Normal, col, Layout::Normal, &mut tmp, false);
                    });
                    tmp
                })
                .collect();
            for (item, tmp) in wave.iter().zip(results) {
                for (o, global, local, len) in self.item_ranges(out, *item) {
                    let b = bias[o];
                    for (dst, &v) in output[global..global + len].iter_mut().zip(&tmp[local..local + len]) {
                        *dst = v + b;
                    }
                }
            }
        }
        output
    }

    /// Gradients w.r.t. weights, bias and (optionally) the input.
    pub fn backward(
        &self,
        input: &[f64],
        samples: usize,
        in_dims: [usize; 3],
        weight: &[f64],
        grad_out: &[f64],
        want_input_grad: bool,
    ) -> ConvBackward {
        let out = self.output_dims(in_dims).expect("input checked by caller");
        let k = self.kdim();
        let mut grad_weight = vec![0.0; self.out_channels * k];
        let mut grad_bias = vec![0.0; self.out_channels];
        let mut grad_input = want_input_grad.then(|| vec![0.0; input.len()]);
        let items = plan(samples, out);
        for wave in items.chunks(wave_size()) {
            let results: Vec<ItemGrads> = wave
                .par_iter()
                .map(|&item| {
                    let cols = item.samples * item.rows * out[2];
                    let mut dout = vec![0.0; self.out_channels * cols];
                    for (_, global, local, len) in self.item_ranges(out, item) {
                        dout[local..local + len].copy_from_slice(&grad_out[global..global + len]);
                    }
                    let bias: Vec<f64> = dout.chunks(cols).map(|row| row.iter().sum()).collect();
                    let mut weight_grad = vec![0.0; self.out_channels * k];
                    with_col_scratch(k * cols, |col| {
                        self.im2col(input, in_dims, out, item, col);
                        matmul(self.out_channels, cols, k, &dout, Layout::Normal, col, Layout::Transposed, &mut weight_grad, false);
                    });
                    let col = want_input_grad.then(|| {
                        let mut dcol = vec![0.0; k * cols];
                        matmul(k, self.out_channels, cols, weight, Layout::Transposed, &dout, Layout::Normal, &mut dcol, false);
                        dcol
                    });
                    ItemGrads {
                        weight: weight_grad,
                        bias,
                        col,
                    }
                })
                .collect();
            for (item, partial) in wave.iter().zip(results) {
                for (g, p) in grad_weight.iter_mut().zip(&partial.weight) {
                    *g += p;
                }
                for (g, p) in grad_bias.iter_mut().zip(&partial.bias) {
                    *g += p;
                }
                if let (Some(gi), Some(dcol)) = (grad_input.as_mut(), partial.col.as_ref()) {
                    self.col2im(dcol, in_dims, out, *item, gi);
                }
            }
        }
        ConvBackward {
            grad_input,
            grad_weight,
            grad_bias,
        }
    }
}

/// Splits `[C, ...]` or `[N, C, ...]` into (batched?, N, C, spatial dims).
fn split_batch(input: &Tensor, spatial_rank: usize) -> Result<(bool, usize, usize, Vec<usize>), LayerError> {
    let dims = input.dims();
    if dims.len() == spatial_rank + 1 {
        Ok((false, 1, dims[0], dims[1..].to_vec()))
    } else if dims.len() == spatial_rank + 2 {
        Ok((true, dims[0], dims[1], dims[2..].to_vec()))
    } else {
        Err(LayerError::BadRank {
            expected: spatial_rank + 1,
            got: dims.len(),
        })
    }
}

fn check_params(engine: &ConvEngine, params: &ConvParams, weight_dims: &[usize]) -> Result<(), LayerError> {
    if params.weight.dims() != weight_dims {
        return Err(LayerError::ShapeMismatch {
            what: "conv weight",
            expected: weight_dims.to_vec(),
            got: params.weight.dims().to_vec(),
        });
    }
    if params.bias.dims() != [engine.out_channels] {
        return Err(LayerError::ShapeMismatch {
            what: "conv bias",
            expected: vec![engine.out_channels],
            got: params.bias.dims().to_vec(),
        });
    }
    Ok(())
}

struct Prepared {
    engine: ConvEngine,
    batched: bool,
    samples: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    spatial_rank: usize,
}

impl Prepared {
    fn output_shape(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(5);
        if self.batched {
            dims.push(self.samples);
        }
        dims.push(self.engine.out_channels);
        dims.extend_from_slice(&self.out_dims[3 - self.spatial_rank..]);
        dims
    }
}

fn prepare(
    input: &Tensor,
    engine: ConvEngine,
    params: &ConvParams,
    weight_dims: &[usize],
    spatial_rank: usize,
    dilation: usize,
) -> Result<Prepared, LayerError> {
    check_params(&engine, params, weight_dims)?;
    let (batched, samples, channels, spatial) = split_batch(input, spatial_rank)?;
    if channels != engine.in_channels {
        return Err(LayerError::ChannelMismatch {
            expected: engine.in_channels,
            got: channels,
        });
    }
    let in_dims = if spatial_rank == 2 {
        [1, spatial[0], spatial[1]]
    } else {
        [spatial[0], spatial[1], spatial[2]]
    };
    let out_dims = engine.output_dims(in_dims).ok_or_else(|| LayerError::InputTooSmall {
        dims: spatial.clone(),
        dilation,
    })?;
    Ok(Prepared {
        engine,
        batched,
        samples,
        in_dims,
        out_dims,
        spatial_rank,
    })
}

fn run_forward(input: &Tensor, params: &ConvParams, prep: &Prepared) -> Result<Tensor, LayerError> {
    let out = prep.engine.forward(
        input.data(),
        prep.samples,
        prep.in_dims,
        params.weight.data(),
        params.bias.data(),
    );
    Ok(Tensor::from_vec(&prep.output_shape(), out)?)
}

fn run_backward(
    input: &Tensor,
    params: &ConvParams,
    grad_out: &Tensor,
    prep: &Prepared,
) -> Result<(Tensor, ConvGrads), LayerError> {
    let expected = prep.output_shape();
    if grad_out.dims() != expected.as_slice() {
        return Err(LayerError::ShapeMismatch {
            what: "conv grad_out",
            expected,
            got: grad_out.dims().to_vec(),
        });
    }
    let back = prep.engine.backward(
        input.data(),
        prep.samples,
        prep.in_dims,
        params.weight.data(),
        grad_out.data(),
        true,
    );
    let grad_input = Tensor::from_vec(input.dims(), back.grad_input.expect("requested"))?;
    let grads = ConvGrads {
        weight: Tensor::from_vec(params.weight.dims(), back.grad_weight)?,
        bias: Tensor::from_vec(params.bias.dims(), back.grad_bias)?,
    };
    Ok((grad_input, grads))
}

/// Dilated 3×3 convolution of `[C_in, H, W]` (or `[N, C_in, H, W]`) into
/// `[C_out, H − 2d, W − 2d]`.
pub fn conv2d_forward(input: &Tensor, spec: &Conv2dSpec, params: &ConvParams) -> Result<Tensor, LayerError> {
    let prep = prepare(input, spec.engine(), params, &spec.weight_dims(), 2, spec.dilation)?;
    run_forward(input, params, &prep)
}

pub fn conv2d_backward(
    input: &Tensor,
    spec: &Conv2dSpec,
    params: &ConvParams,
    grad_out: &Tensor,
) -> Result<(Tensor, ConvGrads), LayerError> {
    let prep = prepare(input, spec.engine(), params, &spec.weight_dims(), 2, spec.dilation)?;
    run_backward(input, params, grad_out, &prep)
}

/// 3×3×3 convolution of `[C_in, D, H, W]` (or batched) into `[C_out, D−2, H−2, W−2]`.
pub fn conv3d_forward(input: &Tensor, spec: &Conv3dSpec, params: &ConvParams) -> Result<Tensor, LayerError> {
    let prep = prepare(input, spec.engine(), params, &spec.weight_dims(), 3, 1)?;
    run_forward(input, params, &prep)
}

pub fn conv3d_backward(
    input: &Tensor,
    spec: &Conv3dSpec,
    params: &ConvParams,
    grad_out: &Tensor,
) -> Result<(Tensor, ConvGrads), LayerError> {
    let prep = prepare(input, spec.engine(), params, &spec.weight_dims(), 3, 1)?;
    run_backward(input, params, grad_out, &prep)
}
