//! Whole-network passes over a batch of training samples.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::branch::{backprop_branch, run_branch, BranchCache};
use super::{BranchGrads, BranchSpec, ModelGrads, ModelParams, NetworkError, Plane, BRANCH_WIDTH, INPUT_CHANNELS, NUM_CLASSES};
use crate::nn::gemm::{matmul, Layout};
use crate::nn::{BatchStats, ConvGrads, LayerError, Mode};
use crate::sampler::SampleBatch;
use crate::tensor::Tensor;

/// How a forward pass treats batch norm and dropout.
pub enum Pass<'r> {
    /// Running statistics, no dropout.
    Eval,
    /// Batch statistics and dropout drawn from `rng`.
    Train { dropout_rate: f64, rng: &'r mut ChaCha8Rng },
}

/// Batch statistics of one training forward pass, to be folded into the
/// running estimates once the step is complete.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    planar: Vec<Vec<BatchStats>>,
    volumetric: Option<Vec<BatchStats>>,
}

impl RunningStats {
    /// With shared weights the three plane uses are averaged into one update.
    pub fn apply(&self, params: &mut ModelParams) {
        let shared = params.variant().shares_planar_weights();
        let sets = params.planar_sets_mut();
        if shared {
            for (l, norm) in sets[0].norms.iter_mut().enumerate() {
                let per_plane: Vec<BatchStats> = self.planar.iter().map(|s| s[l].clone()).collect();
                norm.update_running(&BatchStats::average(&per_plane));
            }
        } else {
            for (set, stats) in sets.iter_mut().zip(&self.planar) {
                for (norm, s) in set.norms.iter_mut().zip(stats) {
                    norm.update_running(s);
                }
            }
        }
        if let Some(stats) = &self.volumetric {
            let vol = params.volumetric_mut().expect("variant has a volumetric branch");
            for (norm, s) in vol.norms.iter_mut().zip(stats) {
                norm.update_running(s);
            }
        }
    }
}

/// Saved state of [`forward_sample_batch`]. In-plane branches are recomputed
/// during the backward pass; only their inputs are kept.
pub struct ForwardCache {
    revision: u64,
    mode: Mode,
    samples: usize,
    planar_inputs: Vec<Vec<f64>>,
    planar_stats: Vec<Vec<BatchStats>>,
    volumetric: Option<BranchCache>,
    /// Concatenated branch outputs after dropout, `[N, F]`.
    features: Vec<f64>,
    dropout_mask: Option<Vec<f64>>,
}

impl ForwardCache {
    pub fn features(&self) -> Tensor {
        let f = self.features.len() / self.samples;
        Tensor::from_vec(&[self.samples, f], self.features.clone()).expect("consistent")
    }

    /// `None` for eval-mode passes.
    pub fn running_stats(&self) -> Option<RunningStats> {
        (self.mode == Mode::Train).then(|| RunningStats {
            planar: self.planar_stats.clone(),
            volumetric: self.volumetric.as_ref().map(|c| c.stats().to_vec()),
        })
    }
}

fn check_patches(params: &ModelParams, batch: &SampleBatch) -> Result<usize, NetworkError> {
    let n = batch.len();
    for (plane, patches) in Plane::PLANAR.iter().zip(&batch.planar) {
        let p = BranchSpec::planar(*plane).receptive_field();
        let expected = vec![n, INPUT_CHANNELS, p, p];
        if patches.dims() != expected.as_slice() {
            return Err(NetworkError::WrongPatchSize {
                plane: *plane,
                expected,
                got: patches.dims().to_vec(),
            });
        }
    }
    if params.variant().has_volumetric() {
        let patches = batch
            .volumetric
            .as_ref()
            .ok_or(NetworkError::MissingVolumetric(params.variant()))?;
        let p = BranchSpec::volumetric().receptive_field();
        let expected = vec![n, INPUT_CHANNELS, p, p, p];
        if patches.dims() != expected.as_slice() {
            return Err(NetworkError::WrongPatchSize {
                plane: Plane::Volumetric,
                expected,
                got: patches.dims().to_vec(),
            });
        }
    }
    Ok(n)
}

/// Writes a branch's `[N, 32]` output into columns `b·32..` of `[N, F]`.
fn scatter_features(features: &mut [f64], branch: &[f64], b: usize, width: usize) {
    for (row, out) in features.chunks_mut(width).zip(branch.chunks(BRANCH_WIDTH)) {
        row[b * BRANCH_WIDTH..(b + 1) * BRANCH_WIDTH].copy_from_slice(out);
    }
}

fn gather_features(features: &[f64], b: usize, width: usize) -> Vec<f64> {
    features
        .chunks(width)
        .flat_map(|row| row[b * BRANCH_WIDTH..(b + 1) * BRANCH_WIDTH].iter().copied())
        .collect()
}

/// `[N, F] → [N, 3]` pointwise classifier.
pub(crate) fn classify(params: &ModelParams, features: &[f64], samples: usize) -> Vec<f64> {
    let width = params.variant().classifier_inputs();
    let cls = params.classifier();
    let mut logits = vec![0.0; samples * NUM_CLASSES];
    matmul(samples, width, NUM_CLASSES, features, Layout::Normal, cls.weight.data(), Layout::Transposed, &mut logits, false);
    for row in logits.chunks_mut(NUM_CLASSES) {
        for (v, b) in row.iter_mut().zip(cls.bias.data()) {
            *v += b;
        }
    }
    logits
}

/// Eval-mode logits without keeping anything for a backward pass.
pub fn predict_batch(params: &ModelParams, batch: &SampleBatch) -> Result<Tensor, NetworkError> {
    let n = check_patches(params, batch)?;
    let width = params.variant().classifier_inputs();
    let mut features = vec![0.0; n * width];
    for (b, spec) in params.variant().branches().iter().enumerate() {
        let (input, set) = branch_input(params, batch, spec)?;
        let run = run_branch(spec, set, input.data(), n, input_dims(input, spec), Mode::Eval, false)?;
        scatter_features(&mut features, &run.output, b, width);
    }
    Ok(Tensor::from_vec(&[n, NUM_CLASSES], classify(params, &features, n))?)
}

fn branch_input<'a>(
    params: &'a ModelParams,
    batch: &'a SampleBatch,
    spec: &BranchSpec,
) -> Result<(&'a Tensor, &'a super::BranchParams), NetworkError> {
    if spec.is_volumetric() {
        let input = batch
            .volumetric
            .as_ref()
            .ok_or(NetworkError::MissingVolumetric(params.variant()))?;
        Ok((input, params.volumetric().expect("variant has a volumetric branch")))
    } else {
        let i = Plane::PLANAR.iter().position(|&p| p == spec.plane).expect("in-plane");
        Ok((&batch.planar[i], params.planar_for(spec.plane)))
    }
}

fn input_dims(input: &Tensor, spec: &BranchSpec) -> [usize; 3] {
    let d = input.dims();
    if spec.is_volumetric() {
        [d[2], d[3], d[4]]
    } else {
        [1, d[2], d[3]]
    }
}

/// Logits `[N, 3]` for a batch of patches and the cache for
/// [`backward_sample_batch`]. Batch-norm running statistics are not updated;
/// see [`ForwardCache::running_stats`].
pub fn forward_sample_batch(
    params: &ModelParams,
    batch: &SampleBatch,
    pass: Pass<'_>,
) -> Result<(Tensor, ForwardCache), NetworkError> {
    let n = check_patches(params, batch)?;
    let mode = match pass {
        Pass::Eval => Mode::Eval,
        Pass::Train { .. } => Mode::Train,
    };
    let width = params.variant().classifier_inputs();
    let mut features = vec![0.0; n * width];
    let mut planar_inputs = Vec::new();
    let mut planar_stats = Vec::new();
    let mut volumetric = None;
    for (b, spec) in params.variant().branches().iter().enumerate() {
        let (input, set) = branch_input(params, batch, spec)?;
        let keep = spec.is_volumetric();
        let run = run_branch(spec, set, input.data(), n, input_dims(input, spec), mode, keep)?;
        scatter_features(&mut features, &run.output, b, width);
        if keep {
            volumetric = run.cache;
        } else {
            planar_inputs.push(input.data().to_vec());
            planar_stats.push(run.stats);
        }
    }
    let dropout_mask = match pass {
        Pass::Train { dropout_rate, rng } if dropout_rate > 0.0 => {
            if !(0.0..1.0).contains(&dropout_rate) {
                return Err(LayerError::InvalidRate(dropout_rate).into());
            }
            let keep = 1.0 / (1.0 - dropout_rate);
            let mask: Vec<f64> = (0..features.len())
                .map(|_| if rng.random::<f64>() < dropout_rate { 0.0 } else { keep })
                .collect();
            for (f, m) in features.iter_mut().zip(&mask) {
                *f *= m;
            }
            Some(mask)
        }
        Pass::Train { dropout_rate, .. } if dropout_rate < 0.0 => {
            return Err(LayerError::InvalidRate(dropout_rate).into());
        }
        _ => None,
    };
    let logits = Tensor::from_vec(&[n, NUM_CLASSES], classify(params, &features, n))?;
    let cache = ForwardCache {
        revision: params.revision(),
        mode,
        samples: n,
        planar_inputs,
        planar_stats,
        volumetric,
        features,
        dropout_mask,
    };
    Ok((logits, cache))
}

/// Gradients of every trainable tensor given `∂loss/∂logits`. With shared
/// in-plane weights the gradient is the sum over the axial, coronal and
/// sagittal uses, accumulated in that order.
pub fn backward_sample_batch(
    params: &ModelParams,
    cache: ForwardCache,
    grad_logits: &Tensor,
) -> Result<ModelGrads, NetworkError> {
    if cache.revision != params.revision() {
        return Err(NetworkError::StaleCache {
            cached: cache.revision,
            current: params.revision(),
        });
    }
    let n = cache.samples;
    if grad_logits.dims() != [n, NUM_CLASSES] {
        return Err(NetworkError::GradShape {
            expected: vec![n, NUM_CLASSES],
            got: grad_logits.dims().to_vec(),
        });
    }
    let width = params.variant().classifier_inputs();
    let g = grad_logits.data();
    let cls = params.classifier();

    let mut dweight = vec![0.0; NUM_CLASSES * width];
    matmul(NUM_CLASSES, n, width, g, Layout::Transposed, &cache.features, Layout::Normal, &mut dweight, false);
    let mut dbias = vec![0.0; NUM_CLASSES];
    for row in g.chunks(NUM_CLASSES) {
        for (d, v) in dbias.iter_mut().zip(row) {
            *d += v;
        }
    }
    let mut dfeat = vec![0.0; n * width];
    matmul(n, NUM_CLASSES, width, g, Layout::Normal, cls.weight.data(), Layout::Normal, &mut dfeat, false);
    if let Some(mask) = &cache.dropout_mask {
        for (d, m) in dfeat.iter_mut().zip(mask) {
            *d *= m;
        }
    }

    let ForwardCache {
        mode,
        planar_inputs,
        volumetric,
        ..
    } = cache;
    let specs = params.variant().branches();

    let volumetric = match volumetric {
        Some(vcache) => {
            let b = specs.len() - 1;
            let set = params.volumetric().expect("variant has a volumetric branch");
            let (grads, _) = backprop_branch(&specs[b], set, vcache, gather_features(&dfeat, b, width), false)?;
            Some(grads)
        }
        None => None,
    };

    let mut planar: Vec<BranchGrads> = Vec::new();
    for (b, input) in planar_inputs.into_iter().enumerate() {
        let spec = &specs[b];
        let set = params.planar_for(spec.plane);
        let run = run_branch(spec, set, &input, n, [1, spec.receptive_field(), spec.receptive_field()], mode, true)?;
        drop(input);
        let (grads, _) = backprop_branch(spec, set, run.cache.expect("cache requested"), gather_features(&dfeat, b, width), false)?;
        if params.variant().shares_planar_weights() && !planar.is_empty() {
            planar[0].add_assign(&grads);
        } else {
            planar.push(grads);
        }
    }

    Ok(ModelGrads {
        planar,
        volumetric,
        classifier: ConvGrads {
            weight: Tensor::from_vec(cls.weight.dims(), dweight)?,
            bias: Tensor::from_vec(&[NUM_CLASSES], dbias)?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error, STEP};
    use crate::network::{build, NetworkVariant};
    use crate::nn::softmax_ce;
    use crate::nn::testing::random_tensor;
    use crate::sampler::SampleCoord;
    use rand::SeedableRng;

    pub(crate) fn random_batch(n: usize, with_3d: bool, rng: &mut ChaCha8Rng) -> SampleBatch {
        SampleBatch {
            planar: [0, 1, 2].map(|_| random_tensor(&[n, 2, 67, 67], rng)),
            volumetric: with_3d.then(|| random_tensor(&[n, 2, 25, 25, 25], rng)),
            labels: (0..n).map(|i| i % 3).collect(),
            coords: (0..n).map(|i| SampleCoord { image: 0, voxel: [i, 0, 0] }).collect(),
        }
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn logits_shape_and_patch_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = build(NetworkVariant::CombinedTriplanar3D, 0);
        let batch = random_batch(2, true, &mut rng);
        let (logits, cache) = forward_sample_batch(&params, &batch, Pass::Eval).unwrap();
        assert_eq!(logits.dims(), &[2, 3]);
        assert_eq!(cache.features().dims(), &[2, 128]);
        assert!(cache.running_stats().is_none());

        let mut missing = batch.clone();
        missing.volumetric = None;
        assert!(matches!(forward_sample_batch(&params, &missing, Pass::Eval), Err(NetworkError::MissingVolumetric(_))));
        let mut wrong = batch.clone();
        wrong.planar[1] = Tensor::zeros(&[2, 2, 65, 67]).unwrap();
        assert!(matches!(
            forward_sample_batch(&params, &wrong, Pass::Eval),
            Err(NetworkError::WrongPatchSize { plane: Plane::Coronal, .. })
        ));
    }

    #[test]
    fn predict_matches_eval_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = build(NetworkVariant::CombinedTriplanar3D, 4);
        let batch = random_batch(3, true, &mut rng);
        let (logits, _) = forward_sample_batch(&params, &batch, Pass::Eval).unwrap();
        assert_eq!(predict_batch(&params, &batch).unwrap(), logits);
    }

    #[test]
    fn shared_planes_see_identical_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = build(NetworkVariant::TriplanarShared, 2);
        let mut batch = random_batch(2, false, &mut rng);
        batch.planar[1] = batch.planar[0].clone();
        batch.planar[2] = batch.planar[0].clone();
        let (_, cache) = forward_sample_batch(&params, &batch, Pass::Eval).unwrap();
        for row in cache.features().data().chunks(96) {
            assert_eq!(row[0..32], row[32..64]);
            assert_eq!(row[0..32], row[64..96]);
        }
    }

    #[test]
    fn shared_equals_separate_before_any_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = random_batch(4, false, &mut rng);
        let shared = build(NetworkVariant::TriplanarShared, 11);
        let separate = build(NetworkVariant::TriplanarSeparate, 11);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let (l1, c1) = forward_sample_batch(&shared, &batch, Pass::Train { dropout_rate: 0.5, rng: &mut r1 }).unwrap();
        let (l2, c2) = forward_sample_batch(&separate, &batch, Pass::Train { dropout_rate: 0.5, rng: &mut r2 }).unwrap();
        assert!(max_abs_diff(l1.data(), l2.data()) <= 1e-12);
        let (_, g) = softmax_ce(&l1, &batch.labels).unwrap();
        let gs = backward_sample_batch(&shared, c1, &g).unwrap();
        let gp = backward_sample_batch(&separate, c2, &g).unwrap();
        let mut sum = gp.planar[0].clone();
        sum.add_assign(&gp.planar[1]);
        sum.add_assign(&gp.planar[2]);
        let a: Vec<&Tensor> = {
            let mut v = Vec::new();
            for (c, nrm) in gs.planar[0].convs.iter().zip(&gs.planar[0].norms) {
                v.extend([&c.weight, &c.bias, &nrm.gamma, &nrm.beta]);
            }
            v
        };
        let b: Vec<&Tensor> = {
            let mut v = Vec::new();
            for (c, nrm) in sum.convs.iter().zip(&sum.norms) {
                v.extend([&c.weight, &c.bias, &nrm.gamma, &nrm.beta]);
            }
            v
        };
        for (x, y) in a.iter().zip(&b) {
            assert!(max_abs_diff(x.data(), y.data()) <= 1e-12);
        }
        assert!(max_abs_diff(gs.classifier.weight.data(), gp.classifier.weight.data()) <= 1e-12);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = build(NetworkVariant::TriplanarSeparate, 1);
        let batch = random_batch(2, false, &mut rng);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (_, cache) = forward_sample_batch(&params, &batch, Pass::Train { dropout_rate: 0.5, rng: &mut r }).unwrap();
        let grads = backward_sample_batch(&params, cache, &Tensor::zeros(&[2, 3]).unwrap()).unwrap();
        assert!(grads.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = build(NetworkVariant::TriplanarShared, 1);
        let batch = random_batch(2, false, &mut rng);
        let (_, cache) = forward_sample_batch(&params, &batch, Pass::Eval).unwrap();
        params.classifier_mut();
        assert!(matches!(
            backward_sample_batch(&params, cache, &Tensor::zeros(&[2, 3]).unwrap()),
            Err(NetworkError::StaleCache { .. })
        ));
    }

    #[test]
    fn eval_logits_ignore_sample_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = build(NetworkVariant::TriplanarSeparate, 3);
        let batch = random_batch(3, false, &mut rng);
        let order = [2, 0, 1];
        let permuted = batch.select(&order);
        let a = predict_batch(&params, &batch).unwrap();
        let b = predict_batch(&params, &permuted).unwrap();
        for (i, &src) in order.iter().enumerate() {
            assert_eq!(b.data()[i * 3..i * 3 + 3], a.data()[src * 3..src * 3 + 3]);
        }
    }

    #[test]
    fn running_stats_update_after_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = build(NetworkVariant::TriplanarShared, 1);
        let batch = random_batch(2, false, &mut rng);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (_, cache) = forward_sample_batch(&params, &batch, Pass::Train { dropout_rate: 0.0, rng: &mut r }).unwrap();
        let stats = cache.running_stats().unwrap();
        stats.apply(&mut params);
        let norm = &params.planar_sets()[0].norms[0];
        let expected: Vec<f64> = (0..32)
            .map(|c| 0.1 * (stats.planar[0][0].mean[c] + stats.planar[1][0].mean[c] + stats.planar[2][0].mean[c]) / 3.0)
            .collect();
        assert!(max_abs_diff(norm.running_mean.data(), &expected) < 1e-15);
    }

    #[test]
    fn end_to_end_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = build(NetworkVariant::CombinedTriplanar3D, 5);
        let batch = random_batch(4, true, &mut rng);
        let loss = |p: &ModelParams| {
            let mut r = ChaCha8Rng::seed_from_u64(1);
            let (logits, _) = forward_sample_batch(p, &batch, Pass::Train { dropout_rate: 0.5, rng: &mut r }).unwrap();
            softmax_ce(&logits, &batch.labels).unwrap().0
        };
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let (logits, cache) = forward_sample_batch(&params, &batch, Pass::Train { dropout_rate: 0.5, rng: &mut r }).unwrap();
        let (_, g) = softmax_ce(&logits, &batch.labels).unwrap();
        let grads = backward_sample_batch(&params, cache, &g).unwrap();
        let names: Vec<String> = params.trainable().into_iter().map(|(n, _)| n).collect();
        let grad_tensors = grads.tensors();
        for target in ["planar.coronal.conv0.weight", "volumetric.conv3.weight", "planar.axial.bn6.gamma", "classifier.weight"] {
            let idx = names.iter().position(|n| n == target).unwrap();
            let slice: Vec<usize> = (0..4).map(|k| k * 7 % params.trainable()[idx].1.len()).collect();
            let point: Vec<f64> = slice.iter().map(|&i| params.trainable()[idx].1.data()[i]).collect();
            let numeric = central_difference(&point, STEP, |v| {
                let mut p = params.clone();
                let mut t = p.trainable_mut();
                for (&i, &x) in slice.iter().zip(v) {
                    t[idx].1.data_mut()[i] = x;
                }
                loss(&p)
            });
            let analytic: Vec<f64> = slice.iter().map(|&i| grad_tensors[idx].data()[i]).collect();
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-3, "{target}: {err}");
        }
    }
}
