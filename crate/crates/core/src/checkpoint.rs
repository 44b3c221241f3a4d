//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     "NTMLABCK"
//! version   u32
//! config    u32 length + UTF-8 JSON of the TrainConfig
//! step, adam_t, elapsed_ms                     u64 each
//! train rng seed u64, word position u128
//! val rng   seed u64, word position u128
//! curve     u32 count, then (step u64, loss f64, bits f64, wall_ms u64)
//! records   u32 count, then (u32 name length, name, u32 rank, u64 dims.., f64 payload..)
//! trailer   SHA-256 of every preceding byte
//! ```
//!
//! Record names are `param/<name>`, `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{AdamState, CurvePoint, TrainConfig, TrainerState};

pub const MAGIC: &[u8; 8] = b"NTMLABCK";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

/// A training run frozen between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainerState,
}

struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn u32(&mut self, x: u32) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }
    fn u128(&mut self, x: u128) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }
    fn record(&mut self, name: &str, t: &Tensor) {
        self.bytes(name.as_bytes());
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &x in t.data() {
            self.f64(x);
        }
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("unexpected end of data"))?;
        let out = &self.buf[self.at..end];
        self.at = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8], CheckpointError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn record(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let name = String::from_utf8(self.bytes()?.to_vec()).map_err(|_| corrupt("record name is not UTF-8"))?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64()?).map_err(|_| corrupt("dimension overflow"))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.at))
            .ok_or_else(|| corrupt(format!("record {name} payload exceeds file")))?;
        let data = (0..count).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder { buf: Vec::new() };
        e.buf.extend_from_slice(MAGIC);
        e.u32(FORMAT_VERSION);
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        e.bytes(&config);
        let s = &self.state;
        e.u64(s.step);
        e.u64(s.adam.t);
        e.u64(s.elapsed_ms);
        e.u64(s.train_rng.0);
        e.u128(s.train_rng.1);
        e.u64(s.val_rng.0);
        e.u128(s.val_rng.1);
        e.u32(s.curve.len() as u32);
        for p in &s.curve {
            e.u64(p.step);
            e.f64(p.val_loss);
            e.f64(p.val_bits_per_seq);
            e.u64(p.wall_ms);
        }
        e.u32(3 * s.params.len() as u32);
        for (i, (_, p)) in s.params.iter().enumerate() {
            e.record(&format!("param/{}", p.name), &p.value);
            e.record(&format!("adam.m/{}", p.name), &s.adam.m[i]);
            e.record(&format!("adam.v/{}", p.name), &s.adam.v[i]);
        }
        let digest = Sha256::digest(&e.buf);
        e.buf.extend_from_slice(&digest);
        e.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(corrupt("file too short"));
        }
        let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if found != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }

        let mut d = Decoder { buf: body, at: 12 };
        let config: TrainConfig =
            serde_json::from_slice(d.bytes()?).map_err(|e| corrupt(format!("config: {e}")))?;
        let step = d.u64()?;
        let adam_t = d.u64()?;
        let elapsed_ms = d.u64()?;
        let train_rng = (d.u64()?, d.u128()?);
        let val_rng = (d.u64()?, d.u128()?);
        let n_points = d.u32()? as usize;
        let mut curve = Vec::with_capacity(n_points.min(1 << 16));
        for _ in 0..n_points {
            curve.push(CurvePoint {
                step: d.u64()?,
                val_loss: d.f64()?,
                val_bits_per_seq: d.f64()?,
                wall_ms: d.u64()?,
            });
        }
        let n_records = d.u32()? as usize;
        if n_records % 3 != 0 {
            return Err(corrupt("record count is not a multiple of three"));
        }
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..n_records / 3 {
            let (pname, value) = d.record()?;
            let name = pname
                .strip_prefix("param/")
                .ok_or_else(|| corrupt(format!("expected a param record, found {pname}")))?
                .to_string();
            let (mname, mt) = d.record()?;
            let (vname, vt) = d.record()?;
            if mname != format!("adam.m/{name}") || vname != format!("adam.v/{name}") {
                return Err(corrupt(format!("optimizer records out of order for {name}")));
            }
            if mt.shape() != value.shape() || vt.shape() != value.shape() {
                return Err(corrupt(format!("optimizer state shape mismatch for {name}")));
            }
            if params.id_of(&name).is_some() {
                return Err(corrupt(format!("duplicate parameter {name}")));
            }
            params.add(name, value);
            m.push(mt);
            v.push(vt);
        }
        if d.at != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            state: TrainerState {
                params,
                adam: AdamState { m, v, t: adam_t },
                step,
                train_rng,
                val_rng,
                curve,
                elapsed_ms,
            },
        })
    }
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let bytes = ckpt.to_bytes();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}
