//! Binary checkpoint container with a JSON sidecar.
//!
//! Layout (all integers little-endian):
//! `IASSCKPT` magic, `u32` version, config JSON, tensor table (name, kind,
//! dims, dtype tag, raw `f64` data), optional optimizer moments, optional RNG
//! position, train-state JSON, and a trailing FNV-1a checksum of all
//! preceding bytes.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{InitRecord, ModelConfig, ParamKind, ParamTensor, SeparatorParams};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"IASSCKPT";
const DTYPE_F64: u8 = 1;

/// Adam moments, aligned with the parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &SeparatorParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: SeparatorParams,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
    pub train_state: serde_json::Value,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format_version: u32,
    config: &'a ModelConfig,
    metadata: super::ParamsMetadata,
    optimizer_step: Option<u64>,
    rng: Option<RngState>,
    train_state: &'a serde_json::Value,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn f64s(&mut self, data: &[f64]) {
        self.u64(data.len() as u64);
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {n}")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn new(params: SeparatorParams) -> Self {
        Self {
            params,
            optimizer: None,
            rng: None,
            train_state: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(&serde_json::to_vec(self.params.config())?);
        let tensors = self.params.tensors();
        w.u32(tensors.len() as u32);
        for t in tensors {
            w.bytes(t.name.as_bytes());
            w.u8(t.kind.code());
            w.u32(t.shape.len() as u32);
            for &d in &t.shape {
                w.u64(d as u64);
            }
            w.bytes(&serde_json::to_vec(&t.init)?);
            w.u8(DTYPE_F64);
            w.f64s(&t.data);
        }
        match &self.optimizer {
            Some(o) => {
                w.u8(1);
                w.u64(o.step);
                for (m, v) in o.m.iter().zip(&o.v) {
                    w.f64s(m);
                    w.f64s(v);
                }
            }
            None => w.u8(0),
        }
        match &self.rng {
            Some(r) => {
                w.u8(1);
                w.u64(r.seed);
                w.u64(r.stream);
                w.0.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => w.u8(0),
        }
        w.bytes(&serde_json::to_vec(&self.train_state)?);
        let sum = fnv1a(&w.0);
        w.u64(sum);
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 4 + 8 || &buf[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut r = Reader {
            buf,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let body = &buf[..buf.len() - 8];
        let stored = u64::from_le_bytes(buf[buf.len() - 8..].try_into().unwrap());
        if fnv1a(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch (file corrupt)".into()));
        }
        let mut r = Reader { buf: body, pos: r.pos };
        let config: ModelConfig = serde_json::from_slice(r.bytes()?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let kind = ParamKind::from_code(r.u8()?)
                .ok_or_else(|| Error::Checkpoint(format!("unknown kind for {name}")))?;
            let ndims = r.u32()? as usize;
            let shape = (0..ndims)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let init: InitRecord = serde_json::from_slice(r.bytes()?)?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("unsupported dtype {dtype} for {name}")));
            }
            let data = r.f64s()?;
            tensors.push(ParamTensor {
                name,
                shape,
                kind,
                init,
                data,
            });
        }
        let params = SeparatorParams::from_tensors(config, tensors)?;
        let optimizer = match r.u8()? {
            0 => None,
            _ => {
                let step = r.u64()?;
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for t in params.tensors() {
                    let (tm, tv) = (r.f64s()?, r.f64s()?);
                    if tm.len() != t.data.len() || tv.len() != t.data.len() {
                        return Err(Error::Checkpoint(format!("optimizer state for {} has wrong length", t.name)));
                    }
                    m.push(tm);
                    v.push(tv);
                }
                Some(OptimizerState { step, m, v })
            }
        };
        let rng = match r.u8()? {
            0 => None,
            _ => Some(RngState {
                seed: r.u64()?,
                stream: r.u64()?,
                word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
            }),
        };
        let train_state = serde_json::from_slice(r.bytes()?)?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            params,
            optimizer,
            rng,
            train_state,
        })
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the container and its `<path>.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        let sidecar = Sidecar {
            format_version: CHECKPOINT_VERSION,
            config: self.params.config(),
            metadata: self.params.metadata(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            rng: self.rng,
            train_state: &self.train_state,
        };
        let side = Self::sidecar_path(path);
        std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
