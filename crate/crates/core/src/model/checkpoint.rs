//! Versioned binary checkpoint container.
//!
//! Layout (little endian):
//! `b"IBFPCKPT"`, `u32` version, `u64` header length, JSON header,
//! `u64` weight count, weights as `f64`, then every normalization layer's
//! running mean and variance as `f64` in layer order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FingerprintModel, ModelConfig, NormStats};
use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 8] = b"IBFPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Resumable position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
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

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: FingerprintModel,
    pub rng: Option<RngState>,
    /// Free-form metadata (training step, beta, ...).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    slot_names: Vec<String>,
    norm_channels: Vec<usize>,
    rng: Option<RngState>,
    meta: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let model = &ckpt.model;
    let header = Header {
        config: model.config.clone(),
        slot_names: model.arch.slots.iter().map(|s| s.name.clone()).collect(),
        norm_channels: model.norms.iter().map(|n| n.mean.len()).collect(),
        rng: ckpt.rng.clone(),
        meta: ckpt.meta.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(8 + 4 + 8 + header.len() + 8 * (model.weights.len() + 1));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(model.weights.len() as u64).to_le_bytes());
    for w in &model.weights {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    for n in &model.norms {
        for v in n.mean.iter().chain(&n.var) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = cur.u64()? as usize;
    let header: Header = serde_json::from_slice(cur.take(header_len)?)?;
    let count = cur.u64()? as usize;
    let weights = (0..count).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
    let mut norms = Vec::with_capacity(header.norm_channels.len());
    for &c in &header.norm_channels {
        let mean = (0..c).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        let var = (0..c).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        norms.push(NormStats { mean, var });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let model = FingerprintModel::from_parts(header.config, weights, norms)?;
    let names: Vec<&str> = model.arch.slots.iter().map(|s| s.name.as_str()).collect();
    if names != header.slot_names {
        return Err(Error::Checkpoint("parameter layout does not match config".into()));
    }
    Ok(Checkpoint {
        model,
        rng: header.rng,
        meta: header.meta,
    })
}
