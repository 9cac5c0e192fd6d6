//! Binary checkpoints.
//!
//! Layout (integers and floats little-endian):
//!
//! ```text
//! magic     8 bytes  "DROPNET\0"
//! version   u32
//! spec      u32 length + UTF-8 network descriptor
//! dropout   f64 input retain, u32 count, f64 × count hidden retains
//! epoch     u64
//! rngs      u32 count, (u64 seed, u128 word position) × count
//! params    u32 count, tensors
//! velocity  u32 count, tensors
//! crc32     u32 over every preceding byte
//! ```
//!
//! A tensor is `u32 ndim, u64 × ndim dims, f64 × product(dims)`.

use std::fs;
use std::path::Path;

use crate::dropout::DropoutSpec;
use crate::error::{Error, Result};
use crate::network::{InitConfig, Network, NetworkSpec};
use crate::optimizer::OptimizerState;
use crate::rng::{RandomSource, RngState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DROPNET\0";
pub const VERSION: u32 = 1;

/// Everything needed to resume training or evaluate a net.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub dropout: DropoutSpec,
    pub optimizer: OptimizerState,
    pub rngs: Vec<RngState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn count(&mut self, elem_bytes: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem_bytes) > self.bytes.len() - self.pos {
            return Err(Error::Checkpoint(format!("count {n} exceeds remaining bytes")));
        }
        Ok(n)
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.count(8)?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.saturating_mul(8) <= self.bytes.len() - self.pos)
            .ok_or_else(|| Error::Checkpoint("tensor larger than file".into()))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64()?);
        }
        Tensor::from_vec(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend(MAGIC);
    w.u32(VERSION);
    let desc = ckpt.network.spec().to_descriptor();
    w.u32(desc.len() as u32);
    w.0.extend(desc.as_bytes());
    w.f64(ckpt.dropout.input_retain);
    w.u32(ckpt.dropout.hidden_retain.len() as u32);
    for &r in &ckpt.dropout.hidden_retain {
        w.f64(r);
    }
    w.u64(ckpt.optimizer.epoch as u64);
    w.u32(ckpt.rngs.len() as u32);
    for s in &ckpt.rngs {
        w.u64(s.seed);
        w.0.extend(s.word_pos.to_le_bytes());
    }
    let params = ckpt.network.params();
    w.u32(params.len() as u32);
    for p in params {
        w.tensor(p);
    }
    w.u32(ckpt.optimizer.velocity.len() as u32);
    for v in &ckpt.optimizer.velocity {
        w.tensor(v);
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let desc_len = r.count(1)?;
    let desc = std::str::from_utf8(r.take(desc_len)?)
        .map_err(|_| Error::Checkpoint("descriptor is not UTF-8".into()))?;
    let spec = NetworkSpec::from_descriptor(desc)?;
    let input_retain = r.f64()?;
    let n_hidden = r.count(8)?;
    let mut hidden_retain = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden_retain.push(r.f64()?);
    }
    let dropout = DropoutSpec {
        input_retain,
        hidden_retain,
    };
    let epoch = r.u64()? as usize;
    let n_rng = r.count(24)?;
    let mut rngs = Vec::with_capacity(n_rng);
    for _ in 0..n_rng {
        rngs.push(RngState {
            seed: r.u64()?,
            word_pos: r.u128()?,
        });
    }
    let n_params = r.count(4)?;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(r.tensor()?);
    }
    let n_vel = r.count(4)?;
    let mut velocity = Vec::with_capacity(n_vel);
    for _ in 0..n_vel {
        velocity.push(r.tensor()?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected bytes before checksum",
            body.len() - r.pos
        )));
    }
    let init = InitConfig {
        weight_sd: 0.0,
        ..InitConfig::default()
    };
    let mut network = Network::init(&spec, &init, None, &mut RandomSource::new(0))?;
    {
        let mut slots = network.params_mut();
        if slots.len() != params.len() || velocity.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "architecture has {} parameter tensors; file holds {} values and {} velocities",
                slots.len(),
                params.len(),
                velocity.len()
            )));
        }
        for (i, ((slot, p), v)) in slots.iter_mut().zip(params).zip(&velocity).enumerate() {
            if !slot.value.same_shape(&p) || !p.same_shape(v) {
                return Err(Error::Checkpoint(format!("parameter {i} has the wrong shape")));
            }
            *slot.value = p;
        }
    }
    dropout
        .validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(Checkpoint {
        network,
        dropout,
        optimizer: OptimizerState { velocity, epoch },
        rngs,
    })
}

/// Writes atomically via a sibling temporary file.
pub fn checkpoint_save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    crate::trainer::create_parent(path)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(ckpt))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
