//! Model checkpoints.
//!
//! ```text
//! "GRCK" | version u32 | config length u64 | config TOML
//! | sections u64 | per section: kind u8 (0 param, 1 buffer) | name length u16
//! | name | values u64 | f64[values]
//! sha256 of everything above [32]
//! ```
//!
//! Sections are written in visiting order and matched by name on load.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::GrassModel;
use crate::config::GrassConfig;
use crate::error::{GrassError, Result};
use crate::nn::Parameters;
use crate::seed::GrassRng;
use rand::SeedableRng;

pub const MAGIC: &[u8; 4] = b"GRCK";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> GrassError {
    GrassError::Checkpoint(msg.into())
}

pub fn encode_checkpoint(model: &GrassModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config.to_toml_string();
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let params = model.params();
    let buffers = model.buffers();
    let sections: Vec<(u8, &str, &[f64])> = params
        .iter()
        .map(|p| (0u8, p.name.as_str(), p.data))
        .chain(buffers.iter().map(|(n, d)| (1u8, n.as_str(), *d)))
        .collect();
    out.extend_from_slice(&(sections.len() as u64).to_le_bytes());
    for (kind, name, data) in sections {
        out.push(kind);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad("truncated checkpoint"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| bad("length out of range"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<GrassModel> {
    if bytes.len() < 40 {
        return Err(bad("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = c.u64()?;
    let cfg_text = std::str::from_utf8(c.take(cfg_len)?).map_err(|_| bad("config is not UTF-8"))?;
    let config = GrassConfig::from_toml_str(cfg_text)?;

    let count = c.u64()?;
    let mut sections: HashMap<(u8, String), Vec<f64>> = HashMap::new();
    for _ in 0..count {
        let kind = c.take(1)?[0];
        let name_len = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(c.take(name_len)?).map_err(|_| bad("section name is not UTF-8"))?;
        let len = c.u64()?;
        let raw = c.take(len.checked_mul(8).ok_or_else(|| bad("section too large"))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        sections.insert((kind, name.to_string()), values);
    }
    if c.pos != body.len() {
        return Err(bad("trailing bytes after last section"));
    }

    // structure comes from the config; values come from the sections
    let mut model = GrassModel::init(&config, &mut GrassRng::seed_from_u64(0))?;
    let mut fill = |kind: u8, name: &str, data: &mut [f64]| -> Result<()> {
        let values = sections
            .remove(&(kind, name.to_string()))
            .ok_or_else(|| bad(format!("missing section {name}")))?;
        if values.len() != data.len() {
            return Err(bad(format!("section {name} has {} values, expected {}", values.len(), data.len())));
        }
        data.copy_from_slice(&values);
        Ok(())
    };
    for p in model.params_mut() {
        fill(0, &p.name, p.data)?;
    }
    for (name, data) in model.buffers_mut() {
        fill(1, &name, data)?;
    }
    if let Some((_, name)) = sections.keys().next() {
        return Err(bad(format!("unexpected section {name}")));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &GrassModel, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(model)).map_err(|e| GrassError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| GrassError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<GrassModel> {
    let bytes = std::fs::read(path).map_err(|e| GrassError::io(path, e))?;
    decode_checkpoint(&bytes)
}
