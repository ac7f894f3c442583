//! Per-channel batch normalisation over `[N, C, spatial...]`.

use super::{LayerError, Mode};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Statistics of one training batch: mean and biased variance per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    input: Tensor,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    mode: Mode,
}

impl BatchNormParams {
    /// gamma = 1, beta = 0, running mean 0, running variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0).expect("channels > 0"),
            beta: Tensor::zeros(&[channels]).expect("channels > 0"),
            running_mean: Tensor::zeros(&[channels]).expect("channels > 0"),
            running_var: Tensor::full(&[channels], 1.0).expect("channels > 0"),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds a batch's statistics into the running estimates. The running
    /// variance uses the unbiased batch variance.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * correction;
        }
    }
}

impl BatchStats {
    /// Channelwise average of several equally sized batches' statistics.
    pub fn average(all: &[BatchStats]) -> BatchStats {
        let k = all.len() as f64;
        let channels = all[0].mean.len();
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for s in all {
            for c in 0..channels {
                mean[c] += s.mean[c] / k;
                var[c] += s.var[c] / k;
            }
        }
        BatchStats {
            mean,
            var,
            count: all[0].count,
        }
    }
}

/// Train-mode normalisation of `x` laid out `[n, c, p]` into `out`.
/// Returns the batch statistics and per-channel `1/sqrt(var + ε)`.
pub(crate) fn bn_train_raw(
    x: &[f64],
    n: usize,
    c: usize,
    p: usize,
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
) -> (BatchStats, Vec<f64>) {
    let count = n * p;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for s in 0..n {
            sum += x[(s * c + ch) * p..(s * c + ch + 1) * p].iter().sum::<f64>();
        }
        let m = sum / count as f64;
        let mut sq = 0.0;
        for s in 0..n {
            sq += x[(s * c + ch) * p..(s * c + ch + 1) * p]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    for s in 0..n {
        for ch in 0..c {
            let range = (s * c + ch) * p..(s * c + ch + 1) * p;
            let (m, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for (o, &v) in out[range.clone()].iter_mut().zip(&x[range]) {
                *o = g * (v - m) * is + b;
            }
        }
    }
    (BatchStats { mean, var, count }, inv_std)
}

/// Backward through normalisation. `x` is the layer input, `dy` the gradient
/// w.r.t. the normalised output; `mean`/`inv_std` are the statistics used in
/// the forward pass. Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward_raw(
    x: &[f64],
    dy: &[f64],
    n: usize,
    c: usize,
    p: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    mode: Mode,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let count = (n * p) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (m, is) = (mean[ch], inv_std[ch]);
        for s in 0..n {
            let range = (s * c + ch) * p..(s * c + ch + 1) * p;
            for (&v, &g) in x[range.clone()].iter().zip(&dy[range]) {
                dgamma[ch] += g * (v - m) * is;
                dbeta[ch] += g;
            }
        }
    }
    let mut dx = vec![0.0; x.len()];
    for ch in 0..c {
        let (m, is, g) = (mean[ch], inv_std[ch], gamma[ch]);
        for s in 0..n {
            let range = (s * c + ch) * p..(s * c + ch + 1) * p;
            let out = &mut dx[range.clone()];
            match mode {
                Mode::Train => {
                    let k = g * is / count;
                    for ((o, &v), &d) in out.iter_mut().zip(&x[range.clone()]).zip(&dy[range]) {
                        let xh = (v - m) * is;
                        *o = k * (count * d - dbeta[ch] - xh * dgamma[ch]);
                    }
                }
                Mode::Eval => {
                    for (o, &d) in out.iter_mut().zip(&dy[range]) {
                        *o = d * g * is;
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

fn layout(input: &Tensor, params: &BatchNormParams) -> Result<(usize, usize, usize), LayerError> {
    let dims = input.dims();
    if dims.len() < 2 {
        return Err(LayerError::BadRank {
            expected: 2,
            got: dims.len(),
        });
    }
    if dims[1] != params.channels() {
        return Err(LayerError::ChannelMismatch {
            expected: params.channels(),
            got: dims[1],
        });
    }
    Ok((dims[0], dims[1], dims[2..].iter().product()))
}

/// Normalises `[N, C, ...]`. In train mode the running statistics in
/// `params` are updated with momentum [`BN_MOMENTUM`].
pub fn batchnorm_forward(
    input: &Tensor,
    params: &mut BatchNormParams,
    mode: Mode,
) -> Result<(Tensor, BatchNormCache), LayerError> {
    if !input.is_finite() {
        return Err(LayerError::NonFiniteInput("batchnorm"));
    }
    let (n, c, p) = layout(input, params)?;
    let mut out = vec![0.0; input.len()];
    let (mean, inv_std) = match mode {
        Mode::Train => {
            if n * p <= 1 {
                return Err(LayerError::BatchTooSmall(n * p));
            }
            let (stats, inv_std) = bn_train_raw(
                input.data(),
                n,
                c,
                p,
                params.gamma.data(),
                params.beta.data(),
                &mut out,
            );
            params.update_running(&stats);
            (stats.mean, inv_std)
        }
        Mode::Eval => {
            let mean = params.running_mean.data().to_vec();
            let inv_std: Vec<f64> = params
                .running_var
                .data()
                .iter()
                .map(|v| 1.0 / (v + BN_EPSILON).sqrt())
                .collect();
            let (gamma, beta) = (params.gamma.data(), params.beta.data());
            for s in 0..n {
                for ch in 0..c {
                    let range = (s * c + ch) * p..(s * c + ch + 1) * p;
                    let (m, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                    for (o, &v) in out[range.clone()].iter_mut().zip(&input.data()[range]) {
                        *o = g * (v - m) * is + b;
                    }
                }
            }
            (mean, inv_std)
        }
    };
    let cache = BatchNormCache {
        input: input.clone(),
        mean,
        inv_std,
        gamma: params.gamma.data().to_vec(),
        mode,
    };
    Ok((Tensor::from_vec(input.dims(), out)?, cache))
}

pub fn batchnorm_backward(cache: &BatchNormCache, grad_out: &Tensor) -> Result<(Tensor, BatchNormGrads), LayerError> {
    if grad_out.dims() != cache.input.dims() {
        return Err(LayerError::ShapeMismatch {
            what: "batchnorm grad_out",
            expected: cache.input.dims().to_vec(),
            got: grad_out.dims().to_vec(),
        });
    }
    let dims = cache.input.dims();
    let (n, c, p) = (dims[0], dims[1], dims[2..].iter().product());
    let (dx, dgamma, dbeta) = bn_backward_raw(
        cache.input.data(),
        grad_out.data(),
        n,
        c,
        p,
        &cache.mean,
        &cache.inv_std,
        &cache.gamma,
        cache.mode,
    );
    Ok((
        Tensor::from_vec(dims, dx)?,
        BatchNormGrads {
            gamma: Tensor::from_vec(&[c], dgamma)?,
            beta: Tensor::from_vec(&[c], dbeta)?,
        },
    ))
}
