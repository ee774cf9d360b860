//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "PQAECKPT" | u32 version | str model_config | str meta | u64 step
//! u32 tensor count, then per tensor:
//!     str name | u8 trainable | u32 rank | u64 extents[rank] | f64 values[..]
//! optimizer: f64 beta1, beta2, eps, weight_decay | u64 step
//!     per tensor: u64 len | f64 m[len] | f64 v[len]
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use super::config::{model_config_text, parse_model_config};
use super::{io_err, DataError, Result};
use crate::model::ModelState;
use crate::tensor::{AdamW, AdamWConfig, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"PQAECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelState,
    pub optimizer: AdamW,
    pub step: u64,
    /// Free-form text stored alongside (the run configuration).
    pub meta: String,
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
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(DataError::Truncated(self.buf.len()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        // Every counted item occupies at least one byte.
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(DataError::Truncated(self.buf.len()));
        }
        Ok(n as usize)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(DataError::Truncated(self.buf.len()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| DataError::Corrupt("invalid UTF-8".into()))
    }
}

pub fn encode_checkpoint(model: &ModelState, optimizer: &AdamW, step: u64, meta: &str) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&model_config_text(&model.config));
    w.str(meta);
    w.u64(step);
    w.u32(model.params.len() as u32);
    for (_, p) in model.params.iter() {
        w.str(&p.name);
        w.u8(p.trainable as u8);
        w.u32(p.value.rank() as u32);
        for &e in p.value.shape() {
            w.u64(e as u64);
        }
        w.f64s(p.value.data());
    }
    let c = &optimizer.config;
    w.f64s(&[c.beta1, c.beta2, c.eps, c.weight_decay]);
    w.u64(optimizer.step);
    for (m, v) in optimizer.first_moment.iter().zip(&optimizer.second_moment) {
        w.u64(m.len() as u64);
        w.f64s(m);
        w.f64s(v);
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(DataError::BadMagic);
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config = parse_model_config(&r.str()?)?;
    let meta = r.str()?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.str()?;
        let trainable = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(DataError::Corrupt(format!("{name}: trainable flag {b}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| DataError::Corrupt(format!("{name}: shape overflow")))?;
        let data = r.f64s(len)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Corrupt(format!("{name}: non-finite value")));
        }
        let t = Tensor::new(&shape, data).map_err(|e| DataError::Corrupt(format!("{name}: {e}")))?;
        params
            .insert(&name, t, trainable)
            .map_err(|e| DataError::Corrupt(e.to_string()))?;
    }
    let hyper = r.f64s(4)?;
    let opt_step = r.u64()?;
    let mut first_moment = Vec::with_capacity(count);
    let mut second_moment = Vec::with_capacity(count);
    for (_, p) in params.iter() {
        let n = r.len()?;
        let expected = if p.trainable { p.value.len() } else { 0 };
        if n != expected {
            return Err(DataError::Corrupt(format!("{}: optimizer state has {n} values, expected {expected}", p.name)));
        }
        first_moment.push(r.f64s(n)?);
        second_moment.push(r.f64s(n)?);
    }
    if r.pos != bytes.len() {
        return Err(DataError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let optimizer = AdamW {
        config: AdamWConfig {
            beta1: hyper[0],
            beta2: hyper[1],
            eps: hyper[2],
            weight_decay: hyper[3],
        },
        step: opt_step,
        first_moment,
        second_moment,
    };
    Ok(Checkpoint {
        model: ModelState::from_params(config, params)?,
        optimizer,
        step,
        meta,
    })
}

/// Writes through a temporary sibling file and renames, so readers never
/// observe a partial checkpoint.
pub fn save_checkpoint(path: &Path, model: &ModelState, optimizer: &AdamW, step: u64, meta: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(model, optimizer, step, meta)).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path).map_err(io_err(path))?)
}
