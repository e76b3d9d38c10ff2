//! Binary parameter files.
//!
//! Layout, all integers little-endian:
//! `b"MMTL"`, `u16` version, the model spec (`u8` sharing, `u8` non-local flag, four `u32`
//! for the encoder widths and head width, `u32` input side), `u32` tensor count, then per
//! tensor a `u16` name length, UTF-8 name, `u8` rank, `u32` extents and `f32` values.
//! A CRC32 of everything before it closes the file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model_unchecked, ModelSpec, Sharing};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMTL";
pub const VERSION: u16 = 1;

pub fn encode_checkpoint<T: Scalar>(params: &ParamStore<T>, spec: &ModelSpec) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + 4 * params.total_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(spec.sharing.code());
    buf.push(spec.use_non_local as u8);
    for v in spec.encoder_channels.iter().chain([&spec.head_hidden, &spec.input_hw]) {
        buf.extend_from_slice(&u32_of(*v)?.to_le_bytes());
    }
    buf.extend_from_slice(&u32_of(params.len())?.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too large: {name}")))?);
        for &d in t.shape() {
            buf.extend_from_slice(&u32_of(d)?.to_le_bytes());
        }
        for &v in t.data() {
            let v = v.to_f32().ok_or_else(|| Error::Checkpoint(format!("{name} does not fit f32")))?;
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit u32")))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ParamStore<T>, spec: &ModelSpec) -> Result<()> {
    let bytes = encode_checkpoint(params, spec)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint("truncated tensor table".into())),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn parse_body<T: Scalar>(body: &[u8]) -> Result<(ParamStore<T>, ModelSpec)> {
    let mut r = Reader { buf: body, pos: MAGIC.len() + 2 };
    let sharing = Sharing::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint("unknown sharing code".into()))?;
    let use_non_local = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Checkpoint(format!("bad non-local flag {other}"))),
    };
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let spec = ModelSpec {
        sharing,
        use_non_local,
        encoder_channels: [dims[0], dims[1], dims[2]],
        head_hidden: dims[3],
        input_hw: dims[4],
    };
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: extent overflow")))?;
        let raw = r.take(n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().expect("4 bytes"))).expect("f32 converts"))
            .collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        params
            .insert(name.clone(), t)
            .map_err(|_| Error::Checkpoint(format!("duplicate tensor {name}")))?;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok((params, spec))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(ParamStore<T>, ModelSpec)> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    if bytes.len() < 6 {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    if bytes.len() < 10 {
        return Err(Error::Checkpoint("truncated tensor table".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        // A cut-off file also fails the checksum; prefer the more specific diagnosis.
        if let Err(e @ Error::Checkpoint(_)) = parse_body::<T>(bytes) {
            if e.to_string().contains("truncated") {
                return Err(e);
            }
        }
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let (params, spec) = parse_body(body)?;
    check_layout(&params, &spec)?;
    Ok((params, spec))
}

/// Every tensor the spec implies must be present with the right shape, and nothing else.
fn check_layout<T: Scalar>(params: &ParamStore<T>, spec: &ModelSpec) -> Result<()> {
    let reference = build_model_unchecked::<T>(spec, 0).map_err(|e| Error::SpecConflict(e.to_string()))?;
    if reference.len() != params.len() {
        return Err(Error::SpecConflict(format!(
            "spec implies {} tensors, file holds {}",
            reference.len(),
            params.len()
        )));
    }
    for (name, t) in reference.iter() {
        let got = params
            .get(name)
            .map_err(|_| Error::SpecConflict(format!("missing tensor {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::SpecConflict(format!(
                "{name} has shape {:?}, spec implies {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, ModelSpec)> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads and insists that the stored spec equals `expected`.
pub fn load_checkpoint_expecting<T: Scalar>(path: &Path, expected: &ModelSpec) -> Result<ParamStore<T>> {
    let (params, spec) = load_checkpoint(path)?;
    if &spec != expected {
        return Err(Error::SpecConflict(format!(
            "checkpoint holds {spec:?}, requested {expected:?}"
        )));
    }
    Ok(params)
}
