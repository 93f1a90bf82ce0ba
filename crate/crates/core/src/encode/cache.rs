//! On-disk cache of per-graph RRWP tensors and degree tables.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GRWP" | version u32 | dataset sha256 [32] | k u32 | graphs u64
//! per graph:
//!   nodes u64 | diag f64[nodes*k] | nnz u64 | row_ptr u64[nodes+1]
//!   | cols u64[nnz] | vals f64[nnz*k] | out_degree u32[nodes] | in_degree u32[nodes]
//! sha256 of everything above [32]
//! ```

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::{rrwp, DegreeTable, RrwpTensor};
use crate::dataset::{file_sha256, read_jsonl, Sample};
use crate::error::{GrassError, Result};

pub const MAGIC: &[u8; 4] = b"GRWP";
pub const VERSION: u32 = 1;

/// Precomputed structure of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEncoding {
    pub rrwp: RrwpTensor,
    pub degrees: DegreeTable,
}

impl GraphEncoding {
    pub fn compute(sample: &Sample, k: usize) -> Result<Self> {
        Ok(GraphEncoding {
            rrwp: rrwp(&sample.graph, k)?,
            degrees: DegreeTable::of(&sample.graph),
        })
    }
}

/// Decoded cache contents.
#[derive(Debug, Clone, PartialEq)]
pub struct RrwpCache {
    pub dataset_hash: [u8; 32],
    pub k: usize,
    pub graphs: Vec<GraphEncoding>,
}

impl RrwpCache {
    /// Checks the cache against the samples it is about to be used with.
    pub fn check_against(&self, samples: &[Sample]) -> Result<()> {
        if samples.len() != self.graphs.len() {
            return Err(GrassError::CacheInvalid(format!(
                "cache holds {} graphs, dataset has {}",
                self.graphs.len(),
                samples.len()
            )));
        }
        for (idx, (s, enc)) in samples.iter().zip(&self.graphs).enumerate() {
            if enc.rrwp.num_nodes() != s.graph.num_nodes() || enc.degrees != DegreeTable::of(&s.graph) {
                return Err(GrassError::CacheInvalid(format!(
                    "graph {idx}: cached structure does not match the dataset"
                )));
            }
        }
        Ok(())
    }
}

/// Whether [`precompute_cache`] reused an existing file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Written,
}

pub fn encode_cache(cache: &RrwpCache) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&cache.dataset_hash);
    out.extend_from_slice(&(cache.k as u32).to_le_bytes());
    out.extend_from_slice(&(cache.graphs.len() as u64).to_le_bytes());
    let put_u64 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u64).to_le_bytes());
    let put_f64s = |out: &mut Vec<u8>, vs: &[f64]| vs.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    for g in &cache.graphs {
        let (diag, row_ptr, cols, vals) = g.rrwp.raw_parts();
        put_u64(&mut out, g.rrwp.num_nodes());
        put_f64s(&mut out, diag);
        put_u64(&mut out, cols.len());
        row_ptr.iter().for_each(|&v| put_u64(&mut out, v));
        cols.iter().for_each(|&v| put_u64(&mut out, v));
        put_f64s(&mut out, vals);
        for &d in g.degrees.out_degree.iter().chain(&g.degrees.in_degree) {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| GrassError::CacheInvalid("truncated cache file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| GrassError::CacheInvalid("count does not fit in memory".into()))
    }

    /// Reads `count` fixed-width items, refusing counts the buffer cannot hold.
    fn many<T>(&mut self, count: usize, width: usize, f: impl Fn(&[u8]) -> T) -> Result<Vec<T>> {
        let bytes = self.take(count.checked_mul(width).ok_or_else(|| GrassError::CacheInvalid("bad count".into()))?)?;
        Ok(bytes.chunks_exact(width).map(f).collect())
    }
}

pub fn decode_cache(bytes: &[u8]) -> Result<RrwpCache> {
    if bytes.len() < MAGIC.len() + 32 {
        return Err(GrassError::CacheInvalid("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(GrassError::CacheInvalid("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(GrassError::CacheInvalid("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(GrassError::CacheInvalid(format!("unsupported cache version {version}")));
    }
    let dataset_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let k = r.u32()? as usize;
    let count = r.u64()?;
    let f64_of = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
    let usize_of = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize;
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let mut graphs = Vec::new();
    for _ in 0..count {
        let nodes = r.u64()?;
        let diag = r.many(nodes.saturating_mul(k), 8, f64_of)?;
        let nnz = r.u64()?;
        let row_ptr = r.many(nodes.saturating_add(1), 8, usize_of)?;
        let cols = r.many(nnz, 8, usize_of)?;
        let vals = r.many(nnz.saturating_mul(k), 8, f64_of)?;
        let out_degree = r.many(nodes, 4, u32_of)?;
        let in_degree = r.many(nodes, 4, u32_of)?;
        let rrwp = RrwpTensor::from_raw(k, nodes, diag, row_ptr, cols, vals)
            .map_err(|e| GrassError::CacheInvalid(e.to_string()))?;
        graphs.push(GraphEncoding {
            rrwp,
            degrees: DegreeTable { out_degree, in_degree },
        });
    }
    if r.pos != body.len() {
        return Err(GrassError::CacheInvalid("trailing bytes after last graph".into()));
    }
    Ok(RrwpCache { dataset_hash, k, graphs })
}

pub fn read_cache(path: &Path) -> Result<RrwpCache> {
    if !path.exists() {
        return Err(GrassError::CacheMissing(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| GrassError::io(path, e))?;
    decode_cache(&bytes)
}

/// Reads a cache and requires it to describe `samples` read from a file with
/// hash `dataset_hash` at walk length `k`.
pub fn load_cache_for(path: &Path, dataset_hash: &[u8; 32], k: usize, samples: &[Sample]) -> Result<RrwpCache> {
    let cache = read_cache(path)?;
    if &cache.dataset_hash != dataset_hash || cache.k != k {
        return Err(GrassError::CacheInvalid(format!(
            "{} was built for another dataset or walk length (k={}); rerun `grass preprocess`",
            path.display(),
            cache.k
        )));
    }
    cache.check_against(samples)?;
    Ok(cache)
}

/// Computes encodings for every sample, in parallel across graphs.
pub fn compute_encodings(samples: &[Sample], k: usize) -> Result<Vec<GraphEncoding>> {
    samples.par_iter().map(|s| GraphEncoding::compute(s, k)).collect()
}

/// Builds the cache for a dataset unless `cache_path` already holds a valid
/// cache for the same dataset bytes and `k`. A corrupt existing file is an
/// error, never silently overwritten.
pub fn precompute_cache(dataset: &Path, k: usize, cache_path: &Path) -> Result<CacheStatus> {
    if k < 1 {
        return Err(crate::error::invalid("RRWP walk length k must be at least 1"));
    }
    let dataset_hash = file_sha256(dataset)?;
    if cache_path.exists() {
        let existing = read_cache(cache_path)?;
        if existing.dataset_hash == dataset_hash && existing.k == k {
            return Ok(CacheStatus::Hit);
        }
    }
    let samples = read_jsonl(dataset)?;
    let graphs = compute_encodings(&samples, k)?;
    let bytes = encode_cache(&RrwpCache { dataset_hash, k, graphs });
    let tmp = cache_path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| GrassError::io(&tmp, e))?;
    fs::rename(&tmp, cache_path).map_err(|e| GrassError::io(cache_path, e))?;
    Ok(CacheStatus::Written)
}
