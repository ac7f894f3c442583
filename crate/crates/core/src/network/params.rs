use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BranchSpec, NetworkVariant, Plane, NUM_CLASSES};
use crate::nn::{BatchNormGrads, BatchNormParams, ConvGrads, ConvParams};
use crate::tensor::Tensor;

/// RNG streams used for initialisation. The in-plane stream is restarted for
/// every in-plane branch, so separate-weight models start with three copies
/// of the shared-weight parameters.
const PLANAR_STREAM: u64 = 1;
const VOLUMETRIC_STREAM: u64 = 2;
const CLASSIFIER_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub convs: Vec<ConvParams>,
    pub norms: Vec<BatchNormParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchGrads {
    pub convs: Vec<ConvGrads>,
    pub norms: Vec<BatchNormGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    variant: NetworkVariant,
    seed: u64,
    /// One entry when weights are shared, otherwise axial, coronal, sagittal.
    planar: Vec<BranchParams>,
    volumetric: Option<BranchParams>,
    /// Pointwise convolution, weight `[3, F, 1, 1, 1]`.
    classifier: ConvParams,
    revision: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub planar: Vec<BranchGrads>,
    pub volumetric: Option<BranchGrads>,
    pub classifier: ConvGrads,
}

fn he_normal(dims: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| normal.sample(rng)).collect()).expect("valid dims")
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl BranchParams {
    /// He-normal weights, zero biases, identity batch norm.
    pub fn init(spec: &BranchSpec, rng: &mut ChaCha8Rng) -> Self {
        let convs = spec
            .layers
            .iter()
            .map(|l| ConvParams {
                weight: he_normal(&l.weight_dims(), l.in_channels() * l.taps(), rng),
                bias: Tensor::zeros(&[l.out_channels()]).expect("channels > 0"),
            })
            .collect();
        let norms = spec.layers.iter().map(|l| BatchNormParams::new(l.out_channels())).collect();
        Self { convs, norms }
    }

    pub fn zero_grads(&self) -> BranchGrads {
        BranchGrads {
            convs: self
                .convs
                .iter()
                .map(|c| ConvGrads {
                    weight: Tensor::zeros(c.weight.dims()).expect("valid"),
                    bias: Tensor::zeros(c.bias.dims()).expect("valid"),
                })
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|n| BatchNormGrads {
                    gamma: Tensor::zeros(n.gamma.dims()).expect("valid"),
                    beta: Tensor::zeros(n.beta.dims()).expect("valid"),
                })
                .collect(),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>, buffers: bool) {
        for (l, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            out.push((format!("{prefix}.conv{l}.weight"), &conv.weight));
            out.push((format!("{prefix}.conv{l}.bias"), &conv.bias));
            out.push((format!("{prefix}.bn{l}.gamma"), &norm.gamma));
            out.push((format!("{prefix}.bn{l}.beta"), &norm.beta));
            if buffers {
                out.push((format!("{prefix}.bn{l}.running_mean"), &norm.running_mean));
                out.push((format!("{prefix}.bn{l}.running_var"), &norm.running_var));
            }
        }
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>, buffers: bool) {
        for (l, (conv, norm)) in self.convs.iter_mut().zip(self.norms.iter_mut()).enumerate() {
            out.push((format!("{prefix}.conv{l}.weight"), &mut conv.weight));
            out.push((format!("{prefix}.conv{l}.bias"), &mut conv.bias));
            out.push((format!("{prefix}.bn{l}.gamma"), &mut norm.gamma));
            out.push((format!("{prefix}.bn{l}.beta"), &mut norm.beta));
            if buffers {
                out.push((format!("{prefix}.bn{l}.running_mean"), &mut norm.running_mean));
                out.push((format!("{prefix}.bn{l}.running_var"), &mut norm.running_var));
            }
        }
    }
}

impl BranchGrads {
    pub fn add_assign(&mut self, other: &BranchGrads) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            add_into(&mut a.weight, &b.weight);
            add_into(&mut a.bias, &b.bias);
        }
        for (a, b) in self.norms.iter_mut().zip(&other.norms) {
            add_into(&mut a.gamma, &b.gamma);
            add_into(&mut a.beta, &b.beta);
        }
    }

    fn tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            out.extend([&conv.weight, &conv.bias, &norm.gamma, &norm.beta]);
        }
    }
}

fn add_into(acc: &mut Tensor, x: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(x.data()) {
        *a += b;
    }
}

fn planar_prefix(variant: NetworkVariant, index: usize) -> String {
    if variant.shares_planar_weights() {
        "planar.shared".to_string()
    } else {
        format!("planar.{}", Plane::PLANAR[index].name())
    }
}

/// Deterministic initialisation of every parameter of `variant` from `seed`.
pub fn build(variant: NetworkVariant, seed: u64) -> ModelParams {
    let planar_sets = if variant.shares_planar_weights() { 1 } else { 3 };
    let planar = (0..planar_sets)
        .map(|i| {
            let mut rng = stream(seed, PLANAR_STREAM);
            BranchParams::init(&BranchSpec::planar(Plane::PLANAR[i]), &mut rng)
        })
        .collect();
    let volumetric = variant.has_volumetric().then(|| {
        let mut rng = stream(seed, VOLUMETRIC_STREAM);
        BranchParams::init(&BranchSpec::volumetric(), &mut rng)
    });
    let features = variant.classifier_inputs();
    let mut rng = stream(seed, CLASSIFIER_STREAM);
    let classifier = ConvParams {
        weight: he_normal(&[NUM_CLASSES, features, 1, 1, 1], features, &mut rng),
        bias: Tensor::zeros(&[NUM_CLASSES]).expect("valid"),
    };
    ModelParams {
        variant,
        seed,
        planar,
        volumetric,
        classifier,
        revision: 0,
    }
}

/// Number of trainable scalars: convolution weights and biases, batch-norm
/// scales and shifts, and the classifier.
pub fn count_parameters(params: &ModelParams) -> usize {
    params.trainable().iter().map(|(_, t)| t.len()).sum()
}

impl ModelParams {
    pub fn variant(&self) -> NetworkVariant {
        self.variant
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Incremented whenever parameters are handed out mutably.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn planar_sets(&self) -> &[BranchParams] {
        &self.planar
    }

    /// The parameter set used by the branch for `plane`.
    pub fn planar_for(&self, plane: Plane) -> &BranchParams {
        let index = Plane::PLANAR.iter().position(|&p| p == plane).expect("in-plane branch");
        if self.variant.shares_planar_weights() {
            &self.planar[0]
        } else {
            &self.planar[index]
        }
    }

    pub fn volumetric(&self) -> Option<&BranchParams> {
        self.volumetric.as_ref()
    }

    pub fn classifier(&self) -> &ConvParams {
        &self.classifier
    }

    pub fn planar_sets_mut(&mut self) -> &mut [BranchParams] {
        self.revision += 1;
        &mut self.planar
    }

    pub fn volumetric_mut(&mut self) -> Option<&mut BranchParams> {
        self.revision += 1;
        self.volumetric.as_mut()
    }

    pub fn classifier_mut(&mut self) -> &mut ConvParams {
        self.revision += 1;
        &mut self.classifier
    }

    fn collect<'a>(&'a self, buffers: bool) -> Vec<(String, &'a Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.planar.iter().enumerate() {
            b.named(&planar_prefix(self.variant, i), &mut out, buffers);
        }
        if let Some(v) = &self.volumetric {
            v.named("volumetric", &mut out, buffers);
        }
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out
    }

    fn collect_mut<'a>(&'a mut self, buffers: bool) -> Vec<(String, &'a mut Tensor)> {
        self.revision += 1;
        let variant = self.variant;
        let mut out = Vec::new();
        for (i, b) in self.planar.iter_mut().enumerate() {
            b.named_mut(&planar_prefix(variant, i), &mut out, buffers);
        }
        if let Some(v) = &mut self.volumetric {
            v.named_mut("volumetric", &mut out, buffers);
        }
        out.push(("classifier.weight".into(), &mut self.classifier.weight));
        out.push(("classifier.bias".into(), &mut self.classifier.bias));
        out
    }

    /// Trainable tensors in a fixed order shared with [`ModelGrads::tensors`].
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        self.collect(false)
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.collect_mut(false)
    }

    /// Trainable tensors plus batch-norm running statistics.
    pub fn all_tensors(&self) -> Vec<(String, &Tensor)> {
        self.collect(true)
    }

    pub fn all_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.collect_mut(true)
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            planar: self.planar.iter().map(BranchParams::zero_grads).collect(),
            volumetric: self.volumetric.as_ref().map(BranchParams::zero_grads),
            classifier: ConvGrads {
                weight: Tensor::zeros(self.classifier.weight.dims()).expect("valid"),
                bias: Tensor::zeros(self.classifier.bias.dims()).expect("valid"),
            },
        }
    }
}

impl ModelGrads {
    /// Gradient tensors in the order of [`ModelParams::trainable`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.planar {
            b.tensors(&mut out);
        }
        if let Some(v) = &self.volumetric {
            v.tensors(&mut out);
        }
        out.push(&self.classifier.weight);
        out.push(&self.classifier.bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}
