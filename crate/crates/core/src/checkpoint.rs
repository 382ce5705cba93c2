//! `LFCK` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LFCK"  version: u32 = 1  count: u32
//! count × { name_len: u16  name  dtype: u8  rank: u8  dims: u64 × rank  data }
//! crc32: u32   (over every preceding byte)
//! ```
//!
//! dtype `0` is `f32`, `1` is `f64` and `2` is raw bytes; models store their
//! configuration and freeze policy as a JSON byte entry named
//! [`META_ENTRY`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::FreezePolicy;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"LFCK";
pub const VERSION: u32 = 1;
pub const META_ENTRY: &str = "__meta__";
const BYTES_CODE: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Bytes(Vec<u8>),
}

impl Entry {
    fn code(&self) -> u8 {
        match self {
            Entry::F32(_) => DType::Single.code(),
            Entry::F64(_) => DType::Double.code(),
            Entry::Bytes(_) => BYTES_CODE,
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            Entry::F32(t) => t.shape().to_vec(),
            Entry::F64(t) => t.shape().to_vec(),
            Entry::Bytes(b) => vec![b.len()],
        }
    }
}

/// Named entries in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, Entry)>,
}

fn write_values<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Data("too many checkpoint entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, entry) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Data(format!("tensor name of {} bytes is too long", name.len())))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.code());
            let shape = entry.shape();
            let rank = u8::try_from(shape.len())
                .map_err(|_| Error::Data(format!("tensor {name} has rank {}", shape.len())))?;
            out.push(rank);
            for d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match entry {
                Entry::F32(t) => write_values(t, &mut out),
                Entry::F64(t) => write_values(t, &mut out),
                Entry::Bytes(b) => out.extend_from_slice(b),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses a complete file image; the CRC is checked before anything else.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Corrupt(format!("file of {} bytes is too short", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("bad magic (not an LFCK checkpoint)".into()));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(Error::Corrupt(format!(
                "CRC mismatch (stored {stored:08x}, computed {actual:08x}); file is truncated or damaged"
            )));
        }
        let mut r = Reader { buf: payload, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            let code = r.u8()?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(usize::try_from(r.u64()?).map_err(|_| Error::Corrupt("dimension overflow".into()))?);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corrupt(format!("tensor {name} is too large")))?;
            let entry = match code {
                0 => Entry::F32(read_tensor(&mut r, &dims, numel)?),
                1 => Entry::F64(read_tensor(&mut r, &dims, numel)?),
                BYTES_CODE if rank == 1 => Entry::Bytes(r.take(numel)?.to_vec()),
                other => return Err(Error::Corrupt(format!("tensor {name} has unknown dtype {other}"))),
            };
            entries.push((name, entry));
        }
        if r.pos != payload.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", payload.len() - r.pos)));
        }
        Ok(Checkpoint { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("lfck.tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }
}

fn read_tensor<T: Element>(r: &mut Reader<'_>, dims: &[usize], numel: usize) -> Result<Tensor<T>> {
    let size = T::DTYPE.size_of();
    let raw = r.take(numel.checked_mul(size).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(dims, data)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// JSON stored under [`META_ENTRY`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub config: ModelConfig,
    #[serde(default)]
    pub freeze: FreezePolicy,
}

/// Element types that can round-trip through a checkpoint entry.
pub trait CheckpointElement: Element {
    fn wrap(t: Tensor<Self>) -> Entry;
    fn unwrap(e: &Entry) -> Option<&Tensor<Self>>;
}

impl CheckpointElement for f32 {
    fn wrap(t: Tensor<f32>) -> Entry {
        Entry::F32(t)
    }
    fn unwrap(e: &Entry) -> Option<&Tensor<f32>> {
        match e {
            Entry::F32(t) => Some(t),
            _ => None,
        }
    }
}

impl CheckpointElement for f64 {
    fn wrap(t: Tensor<f64>) -> Entry {
        Entry::F64(t)
    }
    fn unwrap(e: &Entry) -> Option<&Tensor<f64>> {
        match e {
            Entry::F64(t) => Some(t),
            _ => None,
        }
    }
}

impl<T: CheckpointElement> Model<T> {
    pub fn to_checkpoint(&self, freeze: FreezePolicy) -> Result<Checkpoint> {
        let mut config = self.config.clone();
        config.dtype = T::DTYPE;
        let meta = serde_json::to_vec(&ModelMeta { config, freeze })?;
        let mut entries = vec![(META_ENTRY.to_string(), Entry::Bytes(meta))];
        for (_, name, t) in self.store.iter() {
            let mut t = t.clone();
            t.requires_grad = false;
            t.grad = None;
            entries.push((name.to_string(), T::wrap(t)));
        }
        Ok(Checkpoint { entries })
    }

    /// Rebuilds a model; every stored tensor must have element type `T`.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, FreezePolicy)> {
        let meta = read_meta(ck)?;
        let mut tensors = Vec::with_capacity(ck.entries.len());
        for (name, e) in &ck.entries {
            if name == META_ENTRY {
                continue;
            }
            let t = T::unwrap(e).ok_or_else(|| {
                Error::Corrupt(format!("tensor {name} does not have the expected element type {:?}", T::DTYPE))
            })?;
            tensors.push((name.clone(), t.clone()));
        }
        let model = Model::from_tensors(meta.config, &tensors)?;
        Ok((model, meta.freeze))
    }

    pub fn save(&self, path: &Path, freeze: FreezePolicy) -> Result<()> {
        self.to_checkpoint(freeze)?.write(path)
    }
}

pub fn read_meta(ck: &Checkpoint) -> Result<ModelMeta> {
    match ck.get(META_ENTRY) {
        Some(Entry::Bytes(b)) => serde_json::from_slice(b)
            .map_err(|e| Error::Corrupt(format!("model metadata: {e}"))),
        _ => Err(Error::Corrupt(format!("missing {META_ENTRY} entry"))),
    }
}

/// A model loaded in whichever precision it was saved in.
#[derive(Debug, Clone)]
pub enum AnyModel {
    F32(Model<f32>, FreezePolicy),
    F64(Model<f64>, FreezePolicy),
}

pub fn load_model(path: &Path) -> Result<AnyModel> {
    let ck = Checkpoint::read(path)?;
    match read_meta(&ck)?.config.dtype {
        DType::Single => Model::from_checkpoint(&ck).map(|(m, f)| AnyModel::F32(m, f)),
        DType::Double => Model::from_checkpoint(&ck).map(|(m, f)| AnyModel::F64(m, f)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            entries: vec![
                ("a".into(), Entry::F32(Tensor::from_rows(&[vec![1.0, -2.5]]))),
                ("b".into(), Entry::F64(Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap())),
                ("m".into(), Entry::Bytes(b"{}".to_vec())),
            ],
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let ck = sample();
        let bytes = ck.encode().unwrap();
        assert_eq!(&bytes[..4], b"LFCK");
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn damage_is_detected() {
        let bytes = sample().encode().unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::decode(truncated), Err(Error::Corrupt(_))));
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        let err = Checkpoint::decode(&flipped).unwrap_err();
        assert!(err.to_string().contains("CRC"), "{err}");
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(Checkpoint::decode(&magic), Err(Error::Corrupt(_))));
    }
}
