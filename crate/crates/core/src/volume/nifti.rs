//! Minimal NIfTI-1 reader and writer for 3D scalar volumes.
//!
//! Supports single-file `.nii` (`n+1`) and paired `.hdr`/`.img` (`ni1`),
//! either byte order, and datatypes uint8, int16, float32 and float64.
//! Orientation matrices are ignored; only voxel sizes are kept.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

pub const HEADER_SIZE: usize = 348;
/// Data offset for single-file images: header plus the 4-byte extension flag.
pub const SINGLE_FILE_OFFSET: usize = 352;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("not a NIfTI-1 header (sizeof_hdr is neither 348 little- nor big-endian)")]
    NotNifti,
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("expected a 3D image, dim[0] = {0}")]
    NotThreeDimensional(i16),
    #[error("invalid extent {0} in dim")]
    BadExtent(i16),
    #[error("truncated data: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("vox_offset {0} is invalid")]
    BadOffset(f32),
    #[error("cannot write non-finite value")]
    NonFinite,
    #[error("{0}: expected .nii, .hdr or .img")]
    BadExtension(PathBuf),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    F32,
    F64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Datatype::U8),
            4 => Some(Datatype::I16),
            16 => Some(Datatype::F32),
            64 => Some(Datatype::F64),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// A decoded image: values in `[D, H, W]` order (from dim[3], dim[2], dim[1])
/// and voxel sizes in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub data: Tensor,
    pub voxel_size: [f64; 3],
}

struct ByteWriter {
    buf: Vec<u8>,
    endian: Endian,
}

impl ByteWriter {
    fn put<const N: usize>(&mut self, at: usize, le: [u8; N], be: [u8; N]) {
        let bytes = match self.endian {
            Endian::Little => le,
            Endian::Big => be,
        };
        self.buf[at..at + N].copy_from_slice(&bytes);
    }

    fn i16(&mut self, at: usize, v: i16) {
        self.put(at, v.to_le_bytes(), v.to_be_bytes());
    }

    fn i32(&mut self, at: usize, v: i32) {
        self.put(at, v.to_le_bytes(), v.to_be_bytes());
    }

    fn f32(&mut self, at: usize, v: f32) {
        self.put(at, v.to_le_bytes(), v.to_be_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    endian: Endian,
}

impl ByteReader<'_> {
    fn get<const N: usize>(&self, at: usize) -> [u8; N] {
        self.buf[at..at + N].try_into().expect("in header")
    }

    fn i16(&self, at: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.get(at)),
            Endian::Big => i16::from_be_bytes(self.get(at)),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.get(at)),
            Endian::Big => f32::from_be_bytes(self.get(at)),
        }
    }
}

fn encode_value(v: f64, datatype: Datatype, endian: Endian, out: &mut Vec<u8>) {
    macro_rules! push {
        ($x:expr) => {
            match endian {
                Endian::Little => out.extend_from_slice(&$x.to_le_bytes()),
                Endian::Big => out.extend_from_slice(&$x.to_be_bytes()),
            }
        };
    }
    match datatype {
        Datatype::U8 => out.push(v.round().clamp(0.0, 255.0) as u8),
        Datatype::I16 => push!(v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16),
        Datatype::F32 => push!(v as f32),
        Datatype::F64 => push!(v),
    }
}

fn header(dims: [usize; 3], voxel_size: [f64; 3], datatype: Datatype, endian: Endian, single_file: bool) -> Vec<u8> {
    let mut w = ByteWriter {
        buf: vec![0; HEADER_SIZE],
        endian,
    };
    w.i32(0, HEADER_SIZE as i32);
    w.buf[38] = b'r';
    w.i16(40, 3);
    // NIfTI stores x fastest: dim[1] = W, dim[2] = H, dim[3] = D.
    for (i, &d) in dims.iter().rev().enumerate() {
        w.i16(42 + 2 * i, d as i16);
    }
    for i in 3..7 {
        w.i16(42 + 2 * i, 1);
    }
    w.i16(70, datatype.code());
    w.i16(72, (datatype.bytes() * 8) as i16);
    w.f32(76, 1.0);
    for (i, &s) in voxel_size.iter().rev().enumerate() {
        w.f32(80 + 4 * i, s as f32);
    }
    w.f32(108, if single_file { SINGLE_FILE_OFFSET as f32 } else { 0.0 });
    // scl_slope = 0: values are stored unscaled.
    w.f32(112, 0.0);
    w.f32(116, 0.0);
    w.buf[123] = 2; // millimetres
    w.buf[344..348].copy_from_slice(if single_file { b"n+1\0" } else { b"ni1\0" });
    w.buf
}

fn check_writable(data: &Tensor) -> Result<[usize; 3], NiftiError> {
    let dims: [usize; 3] = data.dims().try_into().map_err(|_| NiftiError::NotThreeDimensional(data.dims().len() as i16))?;
    if let Some(&d) = dims.iter().find(|&&d| d > i16::MAX as usize) {
        return Err(NiftiError::BadExtent(d.min(i16::MAX as usize) as i16));
    }
    if !data.is_finite() {
        return Err(NiftiError::NonFinite);
    }
    Ok(dims)
}

fn encode_data(data: &Tensor, datatype: Datatype, endian: Endian, out: &mut Vec<u8>) {
    out.reserve(data.len() * datatype.bytes());
    for &v in data.data() {
        encode_value(v, datatype, endian, out);
    }
}

/// Single-file (`n+1`) encoding with data at byte 352.
pub fn encode_nifti(data: &Tensor, voxel_size: [f64; 3], datatype: Datatype, endian: Endian) -> Result<Vec<u8>, NiftiError> {
    let dims = check_writable(data)?;
    let mut out = header(dims, voxel_size, datatype, endian, true);
    out.extend_from_slice(&[0; 4]);
    encode_data(data, datatype, endian, &mut out);
    Ok(out)
}

/// Paired (`ni1`) encoding: header bytes and image bytes.
pub fn encode_nifti_pair(
    data: &Tensor,
    voxel_size: [f64; 3],
    datatype: Datatype,
    endian: Endian,
) -> Result<(Vec<u8>, Vec<u8>), NiftiError> {
    let dims = check_writable(data)?;
    let hdr = header(dims, voxel_size, datatype, endian, false);
    let mut img = Vec::new();
    encode_data(data, datatype, endian, &mut img);
    Ok((hdr, img))
}

/// Decodes a header plus either in-file data (`image = None`, magic `n+1`)
/// or a separate image buffer (magic `ni1`).
pub fn decode_nifti(bytes: &[u8], image: Option<&[u8]>) -> Result<NiftiImage, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated {
            needed: HEADER_SIZE,
            have: bytes.len(),
        });
    }
    let size: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    let endian = if i32::from_le_bytes(size) == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(size) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(NiftiError::NotNifti);
    };
    let r = ByteReader { buf: bytes, endian };
    let magic: [u8; 4] = bytes[344..348].try_into().expect("4 bytes");
    let single_file = match &magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => return Err(NiftiError::BadMagic(magic)),
    };
    let rank = r.i16(40);
    if rank != 3 {
        return Err(NiftiError::NotThreeDimensional(rank));
    }
    let mut dims = [0usize; 3];
    for i in 0..3 {
        let d = r.i16(42 + 2 * i);
        if d < 1 {
            return Err(NiftiError::BadExtent(d));
        }
        dims[2 - i] = d as usize;
    }
    let code = r.i16(70);
    let datatype = Datatype::from_code(code).ok_or(NiftiError::UnsupportedDatatype(code))?;
    let voxel_size = [r.f32(88) as f64, r.f32(84) as f64, r.f32(80) as f64].map(|s| if s > 0.0 { s } else { 1.0 });
    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;

    let payload = if single_file {
        let offset = r.f32(108);
        if !(offset >= HEADER_SIZE as f32) || offset.fract() != 0.0 {
            return Err(NiftiError::BadOffset(offset));
        }
        let offset = offset as usize;
        bytes.get(offset..).ok_or(NiftiError::Truncated {
            needed: offset,
            have: bytes.len(),
        })?
    } else {
        let img = image.unwrap_or(&[]);
        let offset = r.f32(108).max(0.0) as usize;
        img.get(offset..).unwrap_or(&[])
    };
    let n: usize = dims.iter().product();
    let needed = n * datatype.bytes();
    if payload.len() < needed {
        return Err(NiftiError::Truncated {
            needed,
            have: payload.len(),
        });
    }
    let raw = &payload[..needed];
    macro_rules! decode {
        ($t:ty, $w:expr) => {
            raw.chunks_exact($w)
                .map(|c| {
                    let b = c.try_into().expect("chunk width");
                    (match endian {
                        Endian::Little => <$t>::from_le_bytes(b),
                        Endian::Big => <$t>::from_be_bytes(b),
                    }) as f64
                })
                .collect::<Vec<f64>>()
        };
    }
    let mut values = match datatype {
        Datatype::U8 => raw.iter().map(|&b| b as f64).collect(),
        Datatype::I16 => decode!(i16, 2),
        Datatype::F32 => decode!(f32, 4),
        Datatype::F64 => decode!(f64, 8),
    };
    if slope != 0.0 && slope.is_finite() {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    Ok(NiftiImage {
        data: Tensor::from_vec(&dims, values)?,
        voxel_size,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>, NiftiError> {
    fs::read(path).map_err(|source| NiftiError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), NiftiError> {
    fs::write(path, bytes).map_err(|source| NiftiError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase())
}

/// Reads `.nii`, or a `.hdr`/`.img` pair given either member.
pub fn read_nifti(path: &Path) -> Result<NiftiImage, NiftiError> {
    match extension(path).as_deref() {
        Some("nii") => decode_nifti(&read_file(path)?, None),
        Some("hdr") | Some("img") => {
            let hdr = read_file(&path.with_extension("hdr"))?;
            let img = read_file(&path.with_extension("img"))?;
            decode_nifti(&hdr, Some(&img))
        }
        _ => Err(NiftiError::BadExtension(path.to_path_buf())),
    }
}

/// Writes little-endian `.nii`, or a `.hdr`/`.img` pair.
pub fn write_nifti(data: &Tensor, voxel_size: [f64; 3], datatype: Datatype, path: &Path) -> Result<(), NiftiError> {
    match extension(path).as_deref() {
        Some("nii") => write_file(path, &encode_nifti(data, voxel_size, datatype, Endian::Little)?),
        Some("hdr") | Some("img") => {
            let (hdr, img) = encode_nifti_pair(data, voxel_size, datatype, Endian::Little)?;
            write_file(&path.with_extension("hdr"), &hdr)?;
            write_file(&path.with_extension("img"), &img)
        }
        _ => Err(NiftiError::BadExtension(path.to_path_buf())),
    }
}
