//! Binary checkpoint container.
//!
//! ```text
//! magic  "RLCKPT\0\0"        8 bytes
//! version u32 LE
//! step    u64 LE
//! config  u64 length + JSON bytes (TrainConfig)
//! rng     32-byte seed, u64 stream, u128 word position
//! adam_t  u64
//! count   u32, then per tensor:
//!         u32 name length + UTF-8 name, u32 rank, u64 dims…, f64 LE data
//! ```
//!
//! Tensor names are prefixed `param/`, `buffer/`, `adam_m/`, `adam_v/`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::params::{ParamSpec, ParamStore};
use super::train::TrainConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RLCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub rng: RngState,
    pub adam_t: u64,
    pub tensors: Vec<NamedTensor>,
}

pub(crate) fn store_tensors(prefix: &str, store: &ParamStore, values: &[f64]) -> Vec<NamedTensor> {
    store
        .specs()
        .iter()
        .map(|s| NamedTensor {
            name: format!("{prefix}/{}", s.name),
            shape: s.shape.clone(),
            data: values[s.offset..s.offset + s.len()].to_vec(),
        })
        .collect()
}

impl Checkpoint {
    /// Gathers the tensors named `prefix/<spec name>` into a flat buffer laid
    /// out like `store`.
    pub(crate) fn flat(&self, prefix: &str, store: &ParamStore) -> Result<Vec<f64>> {
        let mut out = vec![0.0; store.len()];
        for s in store.specs() {
            let t = self.tensor(&format!("{prefix}/{}", s.name))?;
            check_shape(t, s)?;
            out[s.offset..s.offset + s.len()].copy_from_slice(&t.data);
        }
        Ok(out)
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        b.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        b.extend_from_slice(&cfg);
        b.extend_from_slice(&self.rng.seed);
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        b.extend_from_slice(&self.adam_t.to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            b.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            b.extend_from_slice(t.name.as_bytes());
            b.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(8)? != MAGIC {
            return Err(Error::format(origin, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
        }
        let step = r.u64()?;
        let raw_len = r.u64()?;
        let cfg_len = r.len(raw_len)?;
        let config: TrainConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| Error::format(origin, format!("config: {e}")))?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let adam_t = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(origin, "tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                let d = r.u64()?;
                shape.push(r.len(d)?);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| Error::format(origin, "tensor too large"))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::format(origin, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after tensors"));
        }
        Ok(Self {
            step,
            config,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            adam_t,
            tensors,
        })
    }

    /// Writes to a sibling temp file and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn check_shape(t: &NamedTensor, s: &ParamSpec) -> Result<()> {
    if t.shape != s.shape {
        return Err(Error::invalid(format!(
            "tensor {} has shape {:?}, model expects {:?}",
            t.name, t.shape, s.shape
        )));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.origin, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&self, v: u64) -> Result<usize> {
        usize::try_from(v).map_err(|_| Error::format(self.origin, "length overflows"))
    }
}
