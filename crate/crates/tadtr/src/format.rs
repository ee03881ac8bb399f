//! Binary containers for feature sequences (`TADF`) and weights (`TADW`).
//!
//! Both are little-endian. Scalars are stored as `f32`, so a tensor survives
//! a round trip bit-exactly once its values are representable in `f32`.

use std::fs;
use std::path::Path;

use tadtr_core::{ParamStore, Scalar, Tensor};

use crate::error::{io_error, Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"TADF";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TADW";
pub const FORMAT_VERSION: u32 = 1;

/// Rounds every value to the nearest `f32`, the precision files keep.
pub fn round_to_storage(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as Scalar;
    }
}

pub fn round_params_to_storage(params: &mut ParamStore) {
    for entry in params.iter_mut() {
        round_to_storage(&mut entry.value);
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_len(buf: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Malformed {
        path: "<memory>".into(),
        reason: format!("{what} {v} does not fit in u32"),
    })?;
    push_u32(buf, v);
    Ok(())
}

fn push_values(buf: &mut Vec<u8>, data: &[Scalar]) {
    buf.reserve(4 * data.len());
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Cursor over a file's bytes that reports failures against its path.
struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    fn remaining(&self) -> u64 {
        (self.bytes.len() - self.pos) as u64
    }

    fn take(&mut self, n: u64) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Truncated {
                path: self.path.into(),
                needed: n,
                available: self.remaining(),
            });
        }
        let start = self.pos;
        self.pos += n as usize;
        Ok(&self.bytes[start..self.pos])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != magic {
            return Err(Error::BadMagic {
                path: self.path.into(),
                expected: magic,
                found: [found[0], found[1], found[2], found[3]],
            });
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: self.path.into(),
                version,
            });
        }
        Ok(())
    }

    /// Reads `count` values after checking the byte count cannot overflow.
    fn values(&mut self, extents: &[u64]) -> Result<Vec<Scalar>> {
        let overflow = || Error::ExtentOverflow {
            path: self.path.into(),
            extents: extents.to_vec(),
        };
        let count = extents
            .iter()
            .try_fold(1u64, |acc, &e| acc.checked_mul(e))
            .ok_or_else(overflow)?;
        let bytes = count.checked_mul(4).ok_or_else(overflow)?;
        if usize::try_from(bytes).is_err() {
            return Err(overflow());
        }
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Scalar)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            extra => Err(Error::TrailingBytes {
                path: self.path.into(),
                extra,
            }),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_error(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    fs::write(path, bytes).map_err(io_error(path))
}

pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    if features.rank() != 2 {
        return Err(Error::Malformed {
            path: "<memory>".into(),
            reason: format!("features must be [T, C], got {:?}", features.shape()),
        });
    }
    let mut buf = Vec::with_capacity(16 + 4 * features.numel());
    buf.extend_from_slice(&FEATURE_MAGIC);
    push_u32(&mut buf, FORMAT_VERSION);
    push_len(&mut buf, features.rows(), "T")?;
    push_len(&mut buf, features.cols(), "C")?;
    push_values(&mut buf, features.data());
    Ok(buf)
}

pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(path, bytes);
    r.header(FEATURE_MAGIC)?;
    let t = r.u32()? as u64;
    let c = r.u32()? as u64;
    let data = r.values(&[t, c])?;
    r.finish()?;
    Ok(Tensor::new(&[t as usize, c as usize], data)?)
}

pub fn store_features(features: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_features(features)?)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_features(path, &read_file(path)?)
}

pub fn encode_checkpoint(params: &ParamStore) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(12 + 4 * params.num_scalars());
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    push_u32(&mut buf, FORMAT_VERSION);
    push_len(&mut buf, params.len(), "entry count")?;
    for (_, entry) in params.iter() {
        push_len(&mut buf, entry.name.len(), "name length")?;
        buf.extend_from_slice(entry.name.as_bytes());
        push_len(&mut buf, entry.value.rank(), "rank")?;
        for &e in entry.value.shape() {
            push_len(&mut buf, e, "extent")?;
        }
        push_values(&mut buf, entry.value.data());
    }
    Ok(buf)
}

/// Named tensors in file order.
pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(path, bytes);
    r.header(CHECKPOINT_MAGIC)?;
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as u64;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Malformed {
                path: path.into(),
                reason: format!("entry name is not UTF-8: {e}"),
            })?
            .to_owned();
        let rank = r.u32()?;
        let extents = (0..rank).map(|_| r.u32().map(u64::from)).collect::<Result<Vec<_>>>()?;
        let data = r.values(&extents)?;
        let shape: Vec<usize> = extents.iter().map(|&e| e as usize).collect();
        entries.push((name, Tensor::new(&shape, data)?));
    }
    r.finish()?;
    Ok(entries)
}

pub fn save_checkpoint(params: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(params)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    decode_checkpoint(path, &read_file(path)?)
}

/// Copies checkpoint tensors into `params`, which must hold exactly the
/// same names and shapes. The first disagreement is reported by name.
pub fn apply_checkpoint(params: &mut ParamStore, entries: Vec<(String, Tensor)>) -> Result<()> {
    let mismatch = |m: String| Err(Error::CheckpointMismatch(m));
    for (name, tensor) in &entries {
        let Some(id) = params.find(name) else {
            return mismatch(format!("`{name}` is not a parameter of this model"));
        };
        if params.get(id).shape() != tensor.shape() {
            return mismatch(format!(
                "`{name}` has shape {:?} in the checkpoint but {:?} in the model",
                tensor.shape(),
                params.get(id).shape()
            ));
        }
    }
    if let Some(missing) = params
        .names()
        .into_iter()
        .find(|n| !entries.iter().any(|(e, _)| e == n))
    {
        return mismatch(format!("`{missing}` is missing from the checkpoint"));
    }
    for (name, tensor) in entries {
        let id = params.find(&name).expect("checked above");
        *params.get_mut(id) = tensor;
    }
    Ok(())
}
