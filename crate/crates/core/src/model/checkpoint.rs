//! Binary checkpoint files.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! "CLESS" | u32 version | u32 n + n bytes of JSON {config, meta}
//! | u64 vocabulary fingerprint | u32 section count
//! | per section: u32 n + n bytes name, u32 rank, rank x u64 dims, f64 data
//! | u64 FNV-1a of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClessConfig, ClessModel};
use crate::corpus::{Fnv1a, Vocabulary};
use crate::error::{CheckpointError, Error, Result};
use crate::numeric::{Params, Tensor};

const MAGIC: &[u8; 5] = b"CLESS";
pub const VERSION: u32 = 1;

/// Training state stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `pretrain`, `finetune` or empty for an untrained model.
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub dev_ap_micro: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ClessModel,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ClessConfig,
    meta: CheckpointMeta,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(bytes);
    h.finish()
}

pub fn encode_checkpoint(model: &ClessModel, meta: &CheckpointMeta) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        meta: meta.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&model.vocab_hash().to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn save_checkpoint(path: &Path, model: &ClessModel, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode_checkpoint(model, meta);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Truncated(format!("file ends inside {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses checkpoint bytes without checking the vocabulary fingerprint.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic").map_err(|_| CheckpointError::BadMagic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let header_len = r.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    let vocab_hash = r.u64("vocabulary fingerprint")?;
    let n_sections = r.u32("section count")?;
    let mut params = Params::new();
    for _ in 0..n_sections {
        let name_len = r.u32("section name")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "section name")?)
            .map_err(|_| CheckpointError::Malformed("section name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("section rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("section shape")? as usize);
        }
        let n: usize = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("section {name} is too large")))?;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| CheckpointError::Malformed(format!("section {name} is too large")))?,
            &format!("section {name}"),
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("section {name}: {e}")))?;
        params.insert(name, tensor);
    }
    let body_end = r.pos;
    let stored = r.u64("checksum")?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed("trailing bytes after checksum".into()).into());
    }
    if stored != checksum(&bytes[..body_end]) {
        return Err(CheckpointError::Malformed("checksum mismatch".into()).into());
    }
    let model = ClessModel::from_params(header.config, params, vocab_hash)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}

/// Reads a checkpoint without checking which vocabulary it was trained on.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Reads a checkpoint and verifies that it belongs to `vocab`.
pub fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(path)?;
    let expected = vocab.fingerprint();
    if ckpt.model.vocab_hash() != expected {
        return Err(CheckpointError::VocabHash {
            found: ckpt.model.vocab_hash(),
            expected,
        }
        .into());
    }
    Ok(ckpt)
}
