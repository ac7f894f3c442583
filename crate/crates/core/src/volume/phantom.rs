//! Synthetic low-contrast head phantoms.
//!
//! An ellipsoidal brain is split radially into a CSF rim, a gray-matter
//! ribbon and a white-matter core; both boundaries are displaced by smooth
//! random fields. WM and GM differ by only `contrast_gap · σ` in each
//! channel, with opposite ordering in the two channels, while CSF is
//! clearly separated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use super::{Volume, CSF, GM, WM};
use crate::kv::{KvError, KvFile};
use crate::tensor::Tensor;

/// Smallest accepted extent; half the in-plane patch must fit after padding.
pub const MIN_SIZE: usize = 33;
/// Minimum share of masked voxels each class must occupy.
pub const MIN_CLASS_FRACTION: f64 = 0.05;

const SEMI_AXIS: f64 = 0.42;
const CSF_RADIUS: f64 = 0.85;
const GM_RADIUS: f64 = 0.6;
const BOUNDARY_JITTER: f64 = 0.05;
const GM_LEVEL: f64 = 100.0;
/// CSF offset from the tissue means, in units of σ.
const CSF_CONTRAST: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("phantom extents {0:?} must each be at least {MIN_SIZE}")]
    TooSmall([usize; 3]),
    #[error("contrast_gap must lie in [0, 1], got {0}")]
    BadGap(f64),
    #[error("noise_sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("class {class} covers only {fraction:.3} of the mask")]
    ClassTooSmall { class: u8, fraction: f64 },
    #[error(transparent)]
    Config(#[from] KvError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    pub size: [usize; 3],
    pub seed: u64,
    pub contrast_gap: f64,
    pub noise_sigma: f64,
    /// Box-blur radius of the boundary perturbation fields.
    pub smoothness: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: [64; 3],
            seed: 0,
            contrast_gap: 0.5,
            noise_sigma: 10.0,
            smoothness: 6,
        }
    }
}

const KEYS: [&str; 5] = ["size", "seed", "contrast_gap", "noise_sigma", "smoothness"];

fn parse_size(key: &str, value: &str) -> Result<[usize; 3], KvError> {
    let bad = || KvError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    };
    let parts: Vec<usize> = value
        .split('x')
        .map(|p| p.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [n] => Ok([*n; 3]),
        [d, h, w] => Ok([*d, *h, *w]),
        _ => Err(bad()),
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.size.iter().any(|&s| s < MIN_SIZE) {
            return Err(PhantomError::TooSmall(self.size));
        }
        if !(0.0..=1.0).contains(&self.contrast_gap) {
            return Err(PhantomError::BadGap(self.contrast_gap));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(PhantomError::BadSigma(self.noise_sigma));
        }
        Ok(())
    }

    /// Overrides defaults with keys from a config file. `size` is either one
    /// extent or `DxHxW`.
    pub fn from_kv(kv: &KvFile) -> Result<Self, PhantomError> {
        kv.check_keys(&KEYS)?;
        let mut spec = Self::default();
        if let Some(v) = kv.get("size") {
            spec.size = parse_size("size", v)?;
        }
        if let Some(v) = kv.parsed("seed")? {
            spec.seed = v;
        }
        if let Some(v) = kv.parsed("contrast_gap")? {
            spec.contrast_gap = v;
        }
        if let Some(v) = kv.parsed("noise_sigma")? {
            spec.noise_sigma = v;
        }
        if let Some(v) = kv.parsed("smoothness")? {
            spec.smoothness = v;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        let [d, h, w] = self.size;
        kv.set("size", format!("{d}x{h}x{w}"));
        kv.set("seed", self.seed);
        kv.set("contrast_gap", self.contrast_gap);
        kv.set("noise_sigma", self.noise_sigma);
        kv.set("smoothness", self.smoothness);
        kv
    }

    /// Mean intensity of `class` in channel 0 (T1-like) and 1 (T2-like).
    pub fn class_mean(&self, class: u8, channel: usize) -> f64 {
        let gap = self.contrast_gap * self.noise_sigma;
        let csf = CSF_CONTRAST * self.noise_sigma;
        match (channel, class) {
            (0, CSF) => GM_LEVEL - csf,
            (0, GM) => GM_LEVEL,
            (0, _) => GM_LEVEL + gap,
            (_, CSF) => GM_LEVEL + csf,
            (_, GM) => GM_LEVEL + gap,
            (_, _) => GM_LEVEL,
        }
    }
}

/// Uniform noise box-blurred twice along each axis, scaled to max |v| = 1.
fn smooth_field(dims: [usize; 3], radius: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = dims.iter().product::<usize>();
    let mut field: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut line = Vec::new();
    for _ in 0..2 {
        for axis in 0..3 {
            let len = dims[axis];
            let stride = strides[axis];
            for start in 0..n {
                if (start / stride) % len != 0 {
                    continue;
                }
                line.clear();
                line.extend((0..len).map(|i| field[start + i * stride]));
                for i in 0..len {
                    let lo = i.saturating_sub(radius);
                    let hi = (i + radius).min(len - 1);
                    field[start + i * stride] = line[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
                }
            }
        }
    }
    let max = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        for v in &mut field {
            *v /= max;
        }
    }
    field
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Deterministic labelled phantom for `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume, PhantomError> {
    spec.validate()?;
    let dims = spec.size;
    let n = dims.iter().product::<usize>();
    let outer = smooth_field(dims, spec.smoothness, &mut stream(spec.seed, 1));
    let inner = smooth_field(dims, spec.smoothness, &mut stream(spec.seed, 2));
    let center = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let axes = dims.map(|d| SEMI_AXIS * d as f64);

    let mut mask = vec![false; n];
    let mut labels = vec![0u8; n];
    for (i, (m, l)) in mask.iter_mut().zip(labels.iter_mut()).enumerate() {
        let p = [i / (dims[1] * dims[2]), i / dims[2] % dims[1], i % dims[2]];
        let r = (0..3)
            .map(|a| ((p[a] as f64 - center[a]) / axes[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        if r > 1.0 {
            continue;
        }
        *m = true;
        *l = if r > CSF_RADIUS + BOUNDARY_JITTER * outer[i] {
            CSF
        } else if r > GM_RADIUS + BOUNDARY_JITTER * inner[i] {
            GM
        } else {
            WM
        };
    }

    let inside = mask.iter().filter(|&&m| m).count();
    for class in [CSF, GM, WM] {
        let count = labels.iter().zip(&mask).filter(|(&l, &m)| m && l == class).count();
        let fraction = count as f64 / inside.max(1) as f64;
        if fraction < MIN_CLASS_FRACTION {
            return Err(PhantomError::ClassTooSmall { class, fraction });
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let channels = [0usize, 1].map(|c| {
        let mut rng = stream(spec.seed, 3 + c as u64);
        let data = mask
            .iter()
            .zip(&labels)
            .map(|(&m, &l)| if m { spec.class_mean(l, c) + noise.sample(&mut rng) } else { 0.0 })
            .collect();
        Tensor::from_vec(&dims, data).expect("valid dims")
    });
    Ok(Volume::new(channels, mask, Some(labels), [1.0; 3]).expect("phantom satisfies volume invariants"))
}
