//! Binary model container.
//!
//! ```text
//! "VSEG" | u32 version | u8 variant | u64 seed | u32 classifier inputs
//! u32 count | count × tensor
//! u8 has_optimizer [| u64 step | f64 lr, beta1, beta2, eps | u32 count | count × tensor]
//! tensor = u32 name_len | name | u32 rank | rank × u64 extent | f64 data
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{build, ModelParams, NetworkError, NetworkVariant};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VSEG";
pub const FORMAT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> NetworkError {
    NetworkError::Checkpoint(msg.into())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetworkError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NetworkError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NetworkError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NetworkError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, NetworkError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn tensor(&mut self) -> Result<(String, Tensor), NetworkError> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 5 {
            return Err(bad(format!("`{name}` has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| bad(format!("`{name}` extents {dims:?} exceed the file")))?;
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::from_vec(&dims, data)?))
    }
}

pub fn encode(params: &ModelParams, optimizer: Option<&AdamState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(params.variant().tag());
    out.extend_from_slice(&params.seed().to_le_bytes());
    out.extend_from_slice(&(params.variant().classifier_inputs() as u32).to_le_bytes());
    let tensors = params.all_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        put_tensor(&mut out, name, t);
    }
    match optimizer {
        None => out.push(0),
        Some(state) => {
            out.push(1);
            out.extend_from_slice(&state.step_count().to_le_bytes());
            let c = state.config;
            for v in [c.lr, c.beta1, c.beta2, c.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&((state.names().len() * 2) as u32).to_le_bytes());
            for (name, m) in state.names().iter().zip(state.first_moments()) {
                put_tensor(&mut out, &format!("adam.m/{name}"), m);
            }
            for (name, v) in state.names().iter().zip(state.second_moments()) {
                put_tensor(&mut out, &format!("adam.v/{name}"), v);
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams, Option<AdamState>), NetworkError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("missing VSEG magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let tag = r.u8()?;
    let variant = NetworkVariant::from_tag(tag).ok_or_else(|| bad(format!("unknown variant tag {tag}")))?;
    let seed = r.u64()?;
    let width = r.u32()? as usize;
    if width != variant.classifier_inputs() {
        return Err(bad(format!("{variant} expects {} classifier inputs, header says {width}", variant.classifier_inputs())));
    }
    let mut params = build(variant, seed);
    let count = r.u32()? as usize;
    let mut slots = params.all_tensors_mut();
    if count != slots.len() {
        return Err(bad(format!("{variant} has {} tensors, file has {count}", slots.len())));
    }
    for (expected, slot) in slots.iter_mut() {
        let (name, t) = r.tensor()?;
        if name != *expected {
            return Err(bad(format!("expected tensor `{expected}`, found `{name}`")));
        }
        if t.dims() != slot.dims() {
            return Err(bad(format!("`{name}` has shape {:?}, expected {:?}", t.dims(), slot.dims())));
        }
        **slot = t;
    }
    drop(slots);
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let config = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let names: Vec<String> = params.trainable().into_iter().map(|(n, _)| n).collect();
            let count = r.u32()? as usize;
            if count != 2 * names.len() {
                return Err(bad(format!("optimizer block has {count} tensors, expected {}", 2 * names.len())));
            }
            let mut moments = [Vec::new(), Vec::new()];
            for (k, prefix) in ["adam.m/", "adam.v/"].iter().enumerate() {
                for (name, (_, p)) in names.iter().zip(params.trainable()) {
                    let (found, t) = r.tensor()?;
                    if found != format!("{prefix}{name}") || t.dims() != p.dims() {
                        return Err(bad(format!("unexpected optimizer tensor `{found}`")));
                    }
                    moments[k].push(t);
                }
            }
            let [first, second] = moments;
            let state = AdamState::from_parts(config, step, names, first, second)
                .map_err(|e| bad(format!("optimizer block: {e}")))?;
            Some(state)
        }
        other => return Err(bad(format!("bad optimizer flag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((params, optimizer))
}

pub fn save(path: &Path, params: &ModelParams, optimizer: Option<&AdamState>) -> Result<(), NetworkError> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode(params, optimizer))?;
    file.sync_all()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelParams, Option<AdamState>), NetworkError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perturbed(variant: NetworkVariant) -> ModelParams {
        let mut p = build(variant, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (_, t) in p.all_tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-1.0..1.0) * 1e-3;
            }
        }
        p
    }

    fn bits(p: &ModelParams) -> Vec<(String, Vec<u64>)> {
        p.all_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for variant in NetworkVariant::ALL {
            let p = perturbed(variant);
            let (q, opt) = decode(&encode(&p, None)).unwrap();
            assert!(opt.is_none());
            assert_eq!(q.variant(), variant);
            assert_eq!(q.seed(), 42);
            assert_eq!(bits(&p), bits(&q));
        }
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let mut p = perturbed(NetworkVariant::TriplanarShared);
        let mut state = AdamState::for_model(&p, AdamConfig { lr: 3e-4, ..AdamConfig::default() }).unwrap();
        let mut grads = p.zero_grads();
        grads.classifier.weight.data_mut()[5] = 0.25;
        grads.planar[0].convs[2].weight.data_mut()[17] = -1.5;
        state.step(&mut p, &grads).unwrap();
        state.step(&mut p, &grads).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vseg");
        save(&path, &p, Some(&state)).unwrap();
        let (q, restored) = load(&path).unwrap();
        assert_eq!(bits(&p), bits(&q));
        assert_eq!(restored.unwrap(), state);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode(&build(NetworkVariant::TriplanarShared, 0), None);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(decode(&wrong_magic).is_err());
        let mut wrong_variant = bytes.clone();
        wrong_variant[8] = 9;
        assert!(decode(&wrong_variant).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
