//! Binary checkpoints.
//!
//! Layout, little-endian: magic, `u32` version, `u64` length plus config JSON,
//! `u32` tensor count, then per tensor a `u32` name length, the name, a `u32`
//! rank, `u64` dims and `f64` values. A SHA-256 of everything before it
//! closes the file.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DetectorConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numcore::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NPCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn encode_checkpoint(model: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(model.params.numel() * 8 + 4096);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config)?;
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for d in t.dims() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} overflows")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let mut r = Reader { buf: body, pos: 8 };
    // parse first so a cut file reports truncation rather than a checksum miss
    let parsed = parse_body(&mut r);
    if Sha256::digest(body).as_slice() != digest {
        return Err(match parsed {
            Err(e) => e,
            Ok(_) => Error::Checkpoint("checksum mismatch".into()),
        });
    }
    let model = parsed?;
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok(model)
}

fn parse_body(r: &mut Reader<'_>) -> Result<ModelParams> {
    let cfg_len = r.len()?;
    let config: DetectorConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    config.validate()?;
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.len()?);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflows")))?;
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflows".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(dims, data)?);
    }
    Ok(ModelParams { config, params })
}

/// Short hex digest identifying a parameter set.
pub fn model_version(model: &ModelParams) -> Result<String> {
    let bytes = encode_checkpoint(model)?;
    let digest = &bytes[bytes.len() - DIGEST_LEN..];
    Ok(digest[..6].iter().map(|b| format!("{b:02x}")).collect())
}

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads and checks the stored configuration against `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &DetectorConfig) -> Result<ModelParams> {
    let model = load_checkpoint(path)?;
    if &model.config != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {:?}, expected {:?}",
            model.config, expected
        )));
    }
    Ok(model)
}
