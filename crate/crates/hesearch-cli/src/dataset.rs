//! Binary dataset file: header, query, planted indices, database vectors,
//! and optional probe embeddings for ordered identification. All integers
//! little-endian, CRC-32 over the whole body at the end; identical inputs
//! produce identical bytes.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use hesearch_core::util::{crc32, ByteReader, ByteWriter};

const MAGIC: &[u8; 8] = b"HSDSET01";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct DatasetFile {
    pub ell: usize,
    pub seed: u64,
    pub gamma: usize,
    pub query: Vec<f64>,
    pub planted: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
    pub embeddings: Vec<Vec<f64>>,
}

impl DatasetFile {
    pub fn k(&self) -> usize {
        self.vectors.len()
    }

    pub fn km(&self) -> usize {
        self.planted.len()
    }
}

pub fn write_dataset(ds: &DatasetFile, path: &Path) -> anyhow::Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(ds.k() as u64);
    w.u64(ds.km() as u64);
    w.u64(ds.ell as u64);
    w.u64(ds.seed);
    w.u64(ds.gamma as u64);
    for &q in &ds.query {
        w.i64(q as i64);
    }
    for &p in &ds.planted {
        w.u64(p as u64);
    }
    for row in &ds.vectors {
        for &x in row {
            w.i64(x as i64);
        }
    }
    w.u64(ds.embeddings.len() as u64);
    for row in &ds.embeddings {
        for &x in row {
            w.i64(x as i64);
        }
    }
    fs::write(path, w.finish_with_crc())
        .with_context(|| format!("writing dataset to {}", path.display()))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> anyhow::Result<DatasetFile> {
    let bytes =
        fs::read(path).with_context(|| format!("reading dataset from {}", path.display()))?;
    if bytes.len() < 12 {
        bail!("dataset file truncated");
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    if crc32(body) != u32::from_le_bytes(crc_bytes.try_into().unwrap()) {
        bail!("dataset checksum mismatch");
    }
    let mut r = ByteReader::new(body);
    let magic = r.bytes(8).context("dataset truncated")?;
    if magic != MAGIC {
        bail!("bad dataset magic");
    }
    let version = r.u32().context("dataset truncated")?;
    if version != VERSION {
        bail!("unsupported dataset version {version}");
    }
    let k = r.u64().context("dataset truncated")? as usize;
    let km = r.u64().context("dataset truncated")? as usize;
    let ell = r.u64().context("dataset truncated")? as usize;
    let seed = r.u64().context("dataset truncated")?;
    let gamma = r.u64().context("dataset truncated")? as usize;
    let mut query = Vec::with_capacity(ell);
    for _ in 0..ell {
        query.push(r.i64().context("dataset truncated")? as f64);
    }
    let mut planted = Vec::with_capacity(km);
    for _ in 0..km {
        planted.push(r.u64().context("dataset truncated")? as usize);
    }
    let mut vectors = Vec::with_capacity(k);
    for _ in 0..k {
        let mut row = Vec::with_capacity(ell);
        for _ in 0..ell {
            row.push(r.i64().context("dataset truncated")? as f64);
        }
        vectors.push(row);
    }
    let emb_count = r.u64().context("dataset truncated")? as usize;
    let mut embeddings = Vec::with_capacity(emb_count);
    for _ in 0..emb_count {
        let mut row = Vec::with_capacity(ell);
        for _ in 0..ell {
            row.push(r.i64().context("dataset truncated")? as f64);
        }
        embeddings.push(row);
    }
    Ok(DatasetFile { ell, seed, gamma, query, planted, vectors, embeddings })
}
