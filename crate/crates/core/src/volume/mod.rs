//! Multi-channel volumes with brain mask and tissue labels.

pub mod nifti;
pub mod phantom;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use nifti::{read_nifti, write_nifti, Datatype, NiftiError, NiftiImage};
pub use phantom::{generate_phantom, PhantomError, PhantomSpec};

use crate::tensor::Tensor;

pub const CSF: u8 = 0;
pub const GM: u8 = 1;
pub const WM: u8 = 2;
/// Label value for voxels outside the brain mask.
pub const BACKGROUND: u8 = 255;
pub const CLASS_NAMES: [&str; 3] = ["CSF", "GM", "WM"];

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("{what} has extents {got:?}, expected {expected:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: [usize; 3],
        got: Vec<usize>,
    },
    #[error("channel {channel} has a non-finite value at voxel {index}")]
    NonFinite { channel: usize, index: usize },
    #[error("label {value} at voxel {index} is not CSF (0), GM (1) or WM (2)")]
    BadLabel { index: usize, value: u8 },
    #[error("voxel size must be positive, got {0:?}")]
    BadVoxelSize([f64; 3]),
    #[error("no cases (`*_t1.nii`) found in {0}")]
    NoCases(PathBuf),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nifti(#[from] NiftiError),
}

/// Co-registered T1/T2 intensities `[D, H, W]`, brain mask and optional
/// labels. Label maps hold [`BACKGROUND`] exactly where the mask is off.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    channels: [Tensor; 2],
    mask: Vec<bool>,
    labels: Option<Vec<u8>>,
    voxel_size: [f64; 3],
}

/// Per-channel `(mean, std)` removed by [`Volume::normalized`].
pub type ChannelStats = [(f64, f64); 2];

/// Mirror index into `0..n` without repeating the edge voxel, periodic so
/// that any offset is valid: for n = 4, -1 → 1, 4 → 2, 7 → 1.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

impl Volume {
    /// Validates shapes and labels. Labels under the mask must be 0–2; any
    /// value outside the mask is replaced by [`BACKGROUND`].
    pub fn new(
        channels: [Tensor; 2],
        mask: Vec<bool>,
        labels: Option<Vec<u8>>,
        voxel_size: [f64; 3],
    ) -> Result<Self, VolumeError> {
        let dims: [usize; 3] = channels[0].dims().try_into().map_err(|_| VolumeError::ShapeMismatch {
            what: "T1 channel",
            expected: [0; 3],
            got: channels[0].dims().to_vec(),
        })?;
        if channels[1].dims() != dims {
            return Err(VolumeError::ShapeMismatch {
                what: "T2 channel",
                expected: dims,
                got: channels[1].dims().to_vec(),
            });
        }
        let n = dims.iter().product::<usize>();
        if mask.len() != n {
            return Err(VolumeError::ShapeMismatch {
                what: "mask",
                expected: dims,
                got: vec![mask.len()],
            });
        }
        for (c, ch) in channels.iter().enumerate() {
            if let Some(index) = ch.first_non_finite() {
                return Err(VolumeError::NonFinite { channel: c, index });
            }
        }
        if !voxel_size.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(VolumeError::BadVoxelSize(voxel_size));
        }
        let labels = match labels {
            None => None,
            Some(mut l) => {
                if l.len() != n {
                    return Err(VolumeError::ShapeMismatch {
                        what: "labels",
                        expected: dims,
                        got: vec![l.len()],
                    });
                }
                for (i, (v, &m)) in l.iter_mut().zip(&mask).enumerate() {
                    if !m {
                        *v = BACKGROUND;
                    } else if *v > WM {
                        return Err(VolumeError::BadLabel { index: i, value: *v });
                    }
                }
                Some(l)
            }
        };
        Ok(Self {
            dims,
            channels,
            mask,
            labels,
            voxel_size,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn channel(&self, c: usize) -> &Tensor {
        &self.channels[c]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [_, h, w] = self.dims;
        [index / (h * w), index / w % h, index % w]
    }

    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// Each channel rescaled to zero mean and unit variance over the mask.
    /// Voxels outside the mask are shifted and scaled identically.
    pub fn normalized(&self) -> (Self, ChannelStats) {
        let mut stats = [(0.0, 1.0); 2];
        let mut channels = self.channels.clone();
        let count = self.mask.iter().filter(|&&m| m).count();
        for (c, ch) in channels.iter_mut().enumerate() {
            if count == 0 {
                continue;
            }
            let inside = || ch_values(&self.channels[c], &self.mask);
            let mean = inside().sum::<f64>() / count as f64;
            let var = inside().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            for v in ch.data_mut() {
                *v = (*v - mean) / std;
            }
            stats[c] = (mean, std);
        }
        (
            Self {
                channels,
                ..self.clone()
            },
            stats,
        )
    }

    /// Number of masked voxels per class.
    pub fn class_counts(&self) -> Option<[usize; 3]> {
        self.labels.as_ref().map(|labels| {
            let mut counts = [0; 3];
            for &l in labels {
                if l != BACKGROUND {
                    counts[l as usize] += 1;
                }
            }
            counts
        })
    }
}

fn ch_values<'a>(ch: &'a Tensor, mask: &'a [bool]) -> impl Iterator<Item = f64> + 'a {
    ch.data().iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v)
}

/// File names of one case inside a dataset directory.
pub struct CasePaths {
    pub t1: PathBuf,
    pub t2: PathBuf,
    pub mask: PathBuf,
    pub labels: PathBuf,
}

impl CasePaths {
    pub fn new(dir: &Path, name: &str) -> Self {
        Self {
            t1: dir.join(format!("{name}_t1.nii")),
            t2: dir.join(format!("{name}_t2.nii")),
            mask: dir.join(format!("{name}_mask.nii")),
            labels: dir.join(format!("{name}_labels.nii")),
        }
    }
}

/// Writes `<name>_t1.nii`, `_t2.nii` (float64), `_mask.nii` and, if present,
/// `_labels.nii` (uint8, 255 outside the mask).
pub fn save_case(dir: &Path, name: &str, volume: &Volume) -> Result<(), VolumeError> {
    let paths = CasePaths::new(dir, name);
    let vs = volume.voxel_size;
    write_nifti(&volume.channels[0], vs, Datatype::F64, &paths.t1)?;
    write_nifti(&volume.channels[1], vs, Datatype::F64, &paths.t2)?;
    let mask = Tensor::from_vec(&volume.dims, volume.mask.iter().map(|&m| m as u8 as f64).collect()).expect("valid dims");
    write_nifti(&mask, vs, Datatype::U8, &paths.mask)?;
    if let Some(labels) = &volume.labels {
        write_label_map(labels, volume.dims, vs, &paths.labels)?;
    }
    Ok(())
}

pub fn write_label_map(labels: &[u8], dims: [usize; 3], voxel_size: [f64; 3], path: &Path) -> Result<(), VolumeError> {
    let t = Tensor::from_vec(&dims, labels.iter().map(|&l| l as f64).collect()).expect("valid dims");
    write_nifti(&t, voxel_size, Datatype::U8, path)?;
    Ok(())
}

/// Reads a label map written by [`write_label_map`].
pub fn read_label_map(path: &Path) -> Result<(Vec<u8>, [usize; 3]), VolumeError> {
    let img = read_nifti(path)?;
    let dims = img.data.dims().try_into().expect("NIfTI images are 3D");
    Ok((img.data.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect(), dims))
}

/// Loads a case; the label file is optional. A voxel is in the mask when its
/// mask value is positive.
pub fn load_case(dir: &Path, name: &str) -> Result<Volume, VolumeError> {
    let paths = CasePaths::new(dir, name);
    let t1 = read_nifti(&paths.t1)?;
    let t2 = read_nifti(&paths.t2)?;
    let mask_img = read_nifti(&paths.mask)?;
    let dims: [usize; 3] = t1.data.dims().try_into().expect("NIfTI images are 3D");
    if mask_img.data.dims() != dims {
        return Err(VolumeError::ShapeMismatch {
            what: "mask",
            expected: dims,
            got: mask_img.data.dims().to_vec(),
        });
    }
    let mask = mask_img.data.data().iter().map(|&v| v > 0.0).collect();
    let labels = if paths.labels.exists() {
        let (labels, ldims) = read_label_map(&paths.labels)?;
        if ldims != dims {
            return Err(VolumeError::ShapeMismatch {
                what: "labels",
                expected: dims,
                got: ldims.to_vec(),
            });
        }
        Some(labels)
    } else {
        None
    };
    Volume::new([t1.data, t2.data], mask, labels, t1.voxel_size)
}

/// Case names in `dir`, sorted.
pub fn list_cases(dir: &Path) -> Result<Vec<String>, VolumeError> {
    let entries = fs::read_dir(dir).map_err(|source| VolumeError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_t1.nii")).map(str::to_string))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(VolumeError::NoCases(dir.to_path_buf()));
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> Volume {
        let dims = [2, 3, 4];
        let t1 = Tensor::from_vec(&dims, (0..24).map(|i| i as f64).collect()).unwrap();
        let t2 = Tensor::from_vec(&dims, (0..24).map(|i| (24 - i) as f64 * 2.0).collect()).unwrap();
        let mask: Vec<bool> = (0..24).map(|i| i % 5 != 0).collect();
        let labels: Vec<u8> = (0..24).map(|i| (i % 3) as u8).collect();
        Volume::new([t1, t2], mask, Some(labels), [1.0, 1.0, 1.25]).unwrap()
    }

    #[test]
    fn reflect_examples() {
        let got: Vec<usize> = (-5..9).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, [1, 2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect(-40, 1), 0);
        assert_eq!(reflect(-1, 2), 1);
        assert_eq!(reflect(2, 2), 0);
    }

    proptest! {
        #[test]
        fn reflect_is_in_range_and_fixes_interior(i in -500isize..500, n in 1usize..40) {
            let r = reflect(i, n);
            prop_assert!(r < n);
            if (0..n as isize).contains(&i) {
                prop_assert_eq!(r, i as usize);
            }
            // mirror symmetry about 0
            prop_assert_eq!(reflect(-i, n), r);
        }
    }

    #[test]
    fn labels_are_background_outside_mask() {
        let v = tiny();
        for (l, m) in v.labels().unwrap().iter().zip(v.mask()) {
            assert_eq!(*l == BACKGROUND, !m);
        }
        assert_eq!(v.coords(v.index(1, 2, 3)), [1, 2, 3]);
    }

    #[test]
    fn invalid_volumes() {
        let t = Tensor::zeros(&[2, 2, 2]).unwrap();
        let u = Tensor::zeros(&[2, 2, 3]).unwrap();
        assert!(Volume::new([t.clone(), u], vec![true; 8], None, [1.0; 3]).is_err());
        assert!(Volume::new([t.clone(), t.clone()], vec![true; 7], None, [1.0; 3]).is_err());
        assert!(matches!(
            Volume::new([t.clone(), t.clone()], vec![true; 8], Some(vec![3; 8]), [1.0; 3]),
            Err(VolumeError::BadLabel { .. })
        ));
        let mut nan = t.clone();
        nan.data_mut()[3] = f64::NAN;
        assert!(matches!(
            Volume::new([t.clone(), nan], vec![true; 8], None, [1.0; 3]),
            Err(VolumeError::NonFinite { channel: 1, index: 3 })
        ));
        assert!(Volume::new([t.clone(), t], vec![true; 8], None, [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn normalization_is_standard_under_mask() {
        let (n, stats) = tiny().normalized();
        for c in 0..2 {
            let vals: Vec<f64> = ch_values(n.channel(c), n.mask()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
            assert!(stats[c].1 > 0.0);
        }
    }

    #[test]
    fn case_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = tiny();
        save_case(dir.path(), "case00", &v).unwrap();
        save_case(dir.path(), "case01", &v.without_labels()).unwrap();
        assert_eq!(list_cases(dir.path()).unwrap(), ["case00", "case01"]);
        assert_eq!(load_case(dir.path(), "case00").unwrap(), v);
        assert_eq!(load_case(dir.path(), "case01").unwrap().labels(), None);
        assert!(matches!(list_cases(&dir.path().join("nope")), Err(VolumeError::Io { .. })));
    }
}
