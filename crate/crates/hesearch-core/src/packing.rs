//! Database enrollment: diagonal extraction, the three packing layouts,
//! and the on-disk format.
//!
//! All layouts store *generalized diagonals* of square matrices whose rows
//! are the (L2-normalized) database vectors. `FlatConcat` concatenates the
//! diagonals of `num_slots / ell` squares side by side; `FlatPreRotated`
//! additionally absorbs the giant-step rotation offline by cyclically
//! shifting each diagonal row; `ReplicatedStride2N` places groups of `N`
//! vectors at every other `N`-block (zero gaps in between) with a per-block
//! giant-step pre-shift, which is what the block-packed sender consumes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::backend::{CipherVector, HeContext, RotationKeyRegistry};
use crate::error::{Error, Result};
use crate::util::{crc32, ByteReader, ByteWriter};

const DB_MAGIC: &[u8; 8] = b"HSDBDIA1";
const DB_FORMAT_VERSION: u32 = 1;

/// Slot layout of the packed diagonals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Diagonals of `num_slots / ell` squares concatenated per ciphertext.
    FlatConcat,
    /// Groups of `N` vectors at stride `2N` with zero gaps, per-block
    /// pre-shifted for the block-packed sender.
    ReplicatedStride2N,
    /// Flat concatenation with the giant-step rotation absorbed at
    /// enrollment.
    FlatPreRotated,
}

impl Layout {
    pub fn code(self) -> u8 {
        match self {
            Layout::FlatConcat => 0,
            Layout::ReplicatedStride2N => 1,
            Layout::FlatPreRotated => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Layout::FlatConcat),
            1 => Ok(Layout::ReplicatedStride2N),
            2 => Ok(Layout::FlatPreRotated),
            other => Err(Error::Format(format!("unknown layout code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Layout::FlatConcat => "flat",
            Layout::ReplicatedStride2N => "replicated",
            Layout::FlatPreRotated => "pre-rotated",
        }
    }
}

/// Where (if anywhere) the giant-step pre-rotation was applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreRotation {
    None,
    PlainAtEnroll,
    HomomorphicAtLoad,
}

impl PreRotation {
    pub fn code(self) -> u8 {
        match self {
            PreRotation::None => 0,
            PreRotation::PlainAtEnroll => 1,
            PreRotation::HomomorphicAtLoad => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(PreRotation::None),
            1 => Ok(PreRotation::PlainAtEnroll),
            2 => Ok(PreRotation::HomomorphicAtLoad),
            other => Err(Error::Format(format!("unknown pre-rotation code {other}"))),
        }
    }
}

/// Packing dimensions shared by the enroller and the engines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutParams {
    /// Vector dimension (power of two).
    pub ell: usize,
    /// SIMD slots per ciphertext.
    pub num_slots: usize,
    /// Baby-step size used for pre-shifts.
    pub n1: usize,
    pub layout: Layout,
}

impl LayoutParams {
    pub fn new(ell: usize, num_slots: usize, n1: usize, layout: Layout) -> Result<Self> {
        let p = LayoutParams { ell, num_slots, n1, layout };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ell == 0 || !self.ell.is_power_of_two() {
            return Err(Error::Params(format!("ell must be a power of two, got {}", self.ell)));
        }
        if self.num_slots == 0 || !self.num_slots.is_power_of_two() {
            return Err(Error::Params(format!(
                "num_slots must be a power of two, got {}",
                self.num_slots
            )));
        }
        if self.ell > self.num_slots {
            return Err(Error::Params(format!(
                "ell {} exceeds num_slots {}",
                self.ell, self.num_slots
            )));
        }
        if self.n1 == 0 || self.n1 > self.ell {
            return Err(Error::Params(format!("n1 must satisfy 1 <= n1 <= ell, got {}", self.n1)));
        }
        if self.layout == Layout::ReplicatedStride2N && !self.blocks_per_ciphertext().is_multiple_of(2) {
            return Err(Error::OddBlockCount { m: self.blocks_per_ciphertext() });
        }
        Ok(())
    }

    /// Block size `N = min(ell, num_slots)`; equal to `ell` whenever the
    /// parameters validate.
    pub fn n(&self) -> usize {
        self.ell.min(self.num_slots)
    }

    /// Blocks per ciphertext `M = floor(num_slots / N)`.
    pub fn blocks_per_ciphertext(&self) -> usize {
        self.num_slots / self.n()
    }

    /// Square matrices packed side by side in one flat ciphertext.
    pub fn squares_per_group(&self) -> usize {
        self.num_slots / self.ell
    }

    /// Flat matrix groups needed for `k` vectors.
    pub fn flat_group_count(&self, k: usize) -> usize {
        k.div_ceil(self.num_slots)
    }

    /// `N`-vector groups needed for `k` vectors (replicated layout).
    pub fn vector_group_count(&self, k: usize) -> usize {
        k.div_ceil(self.n())
    }

    /// Aggregate ciphertexts per diagonal in the replicated layout; each
    /// holds up to `M/2` vector groups at stride `2N`.
    pub fn aggregate_count(&self, k: usize) -> usize {
        (2 * self.vector_group_count(k)).div_ceil(self.blocks_per_ciphertext())
    }
}

/// Encrypted diagonals indexed by `(group, diagonal)`, plus the layout
/// metadata the engines need.
#[derive(Debug)]
pub struct PackedDatabase {
    params: LayoutParams,
    pre_rotation: PreRotation,
    vector_count: usize,
    group_count: usize,
    max_level: u32,
    diagonals: BTreeMap<(usize, usize), CipherVector>,
}

impl PackedDatabase {
    pub fn params(&self) -> &LayoutParams {
        &self.params
    }

    pub fn pre_rotation(&self) -> PreRotation {
        self.pre_rotation
    }

    pub fn vector_count(&self) -> usize {
        self.vector_count
    }

    /// Matrix groups for flat layouts, aggregates for the replicated one.
    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn max_level(&self) -> u32 {
        self.max_level
    }

    pub fn diagonal(&self, group: usize, k: usize) -> Result<&CipherVector> {
        self.diagonals.get(&(group, k)).ok_or(Error::MissingDiagonal { group, k })
    }

    pub fn diagonal_count(&self) -> usize {
        self.diagonals.len()
    }
}

/// L2-normalize a vector, preserving its direction.
pub fn normalize_l2(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Generalized diagonals of a square matrix given by rows:
/// `diag_k[j] = rows[j][(j + k) mod ell]`.
pub fn extract_diagonals(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let ell = rows.len();
    if ell == 0 || rows.iter().any(|r| r.len() != ell) {
        return Err(Error::Shape);
    }
    let mut diagonals = vec![vec![0.0; ell]; ell];
    for (k, diag) in diagonals.iter_mut().enumerate() {
        for (j, d) in diag.iter_mut().enumerate() {
            *d = rows[j][(j + k) % ell];
        }
    }
    Ok(diagonals)
}

/// Row `j` of the square that database vector `v` lives in, or zeros for
/// padding positions past the end of the database.
fn db_row(vectors: &[Vec<f64>], v: usize) -> Option<&[f64]> {
    vectors.get(v).map(|r| r.as_slice())
}

/// Plain diagonal rows for the flat layouts. Row `(m, k)` holds diagonal
/// `k` of each square in matrix group `m`, side by side.
fn flat_diagonal_rows(vectors: &[Vec<f64>], params: &LayoutParams) -> Vec<Vec<Vec<f64>>> {
    let ell = params.ell;
    let squares = params.squares_per_group();
    let groups = params.flat_group_count(vectors.len());
    let mut out = Vec::with_capacity(groups);
    for m in 0..groups {
        let mut per_k = Vec::with_capacity(ell);
        for k in 0..ell {
            let mut row = vec![0.0; params.num_slots];
            for b in 0..squares {
                let square = m * squares + b;
                for j in 0..ell {
                    let v = square * ell + j;
                    if let Some(vec) = db_row(vectors, v) {
                        row[b * ell + j] = vec[(j + k) % ell];
                    }
                }
            }
            per_k.push(row);
        }
        out.push(per_k);
    }
    out
}

/// Flat enrollment: one ciphertext per (matrix group, diagonal index).
pub fn pack_flat(ctx: &HeContext, vectors: &[Vec<f64>], params: &LayoutParams) -> Result<PackedDatabase> {
    params.validate()?;
    check_input(ctx, vectors, params)?;
    if params.layout != Layout::FlatConcat {
        return Err(Error::WrongLayout {
            expected: Layout::FlatConcat.name().into(),
            found: params.layout.name().into(),
        });
    }
    let rows = flat_diagonal_rows(vectors, params);
    let mut diagonals = BTreeMap::new();
    for (m, per_k) in rows.iter().enumerate() {
        for (k, row) in per_k.iter().enumerate() {
            let ct = ctx.encrypt(&ctx.encode(row)?);
            diagonals.insert((m, k), ct);
        }
    }
    Ok(PackedDatabase {
        params: *params,
        pre_rotation: PreRotation::None,
        vector_count: vectors.len(),
        group_count: params.flat_group_count(vectors.len()),
        max_level: ctx.max_level(),
        diagonals,
    })
}

/// Absorb the giant-step rotation at enrollment: diagonal `j*n1 + i` is
/// stored cyclically shifted right by `j*n1` across the whole slot row, so
/// the online giant-step rotation by `+j*n1` restores it exactly. Operates
/// in the plaintext domain (no rotation keys, no rotation charges).
pub fn pre_rotate_flat(ctx: &HeContext, db: &PackedDatabase, n1: usize) -> Result<PackedDatabase> {
    if db.params.layout != Layout::FlatConcat || db.pre_rotation != PreRotation::None {
        return Err(Error::WrongLayout {
            expected: Layout::FlatConcat.name().into(),
            found: db.params.layout.name().into(),
        });
    }
    if n1 == 0 || n1 > db.params.ell {
        return Err(Error::Params(format!("n1 must satisfy 1 <= n1 <= ell, got {n1}")));
    }
    let num_slots = db.params.num_slots;
    let mut diagonals = BTreeMap::new();
    for (&(m, k), ct) in &db.diagonals {
        let giant = (k / n1) * n1;
        let shifted = rotate_right(ct.slots(), giant % num_slots);
        diagonals.insert((m, k), ctx.encrypt(&ctx.encode(&shifted)?));
    }
    Ok(PackedDatabase {
        params: LayoutParams { n1, layout: Layout::FlatPreRotated, ..db.params },
        pre_rotation: PreRotation::PlainAtEnroll,
        vector_count: db.vector_count,
        group_count: db.group_count,
        max_level: db.max_level,
        diagonals,
    })
}

/// Server-side variant of the pre-rotation: rotate the already-encrypted
/// diagonals by `-j*n1` when loading them. Needs the negative giant-step
/// keys, which can be discarded afterwards; levels are untouched.
pub fn pre_rotate_at_load(
    ctx: &HeContext,
    db: &PackedDatabase,
    n1: usize,
    keys: &RotationKeyRegistry,
) -> Result<PackedDatabase> {
    if db.params.layout != Layout::FlatConcat || db.pre_rotation != PreRotation::None {
        return Err(Error::WrongLayout {
            expected: Layout::FlatConcat.name().into(),
            found: db.params.layout.name().into(),
        });
    }
    let mut diagonals = BTreeMap::new();
    for (&(m, k), ct) in &db.diagonals {
        let giant = ((k / n1) * n1) as i64;
        diagonals.insert((m, k), ctx.rotate(ct, -giant, keys)?);
    }
    Ok(PackedDatabase {
        params: LayoutParams { n1, layout: Layout::FlatPreRotated, ..db.params },
        pre_rotation: PreRotation::HomomorphicAtLoad,
        vector_count: db.vector_count,
        group_count: db.group_count,
        max_level: db.max_level,
        diagonals,
    })
}

/// Signed diagonal index in `[-N/2, N/2)` for the block-packed layout.
pub fn signed_diagonal(k_unsigned: usize, n: usize) -> i64 {
    if k_unsigned < n / 2 {
        k_unsigned as i64
    } else {
        k_unsigned as i64 - n as i64
    }
}

/// Giant-step index of a signed diagonal: floor toward negative infinity.
pub fn giant_index(k_signed: i64, n1: usize) -> i64 {
    k_signed.div_euclid(n1 as i64)
}

/// Per-block right pre-shift applied to diagonal `k` at enrollment, and
/// undone by the sender's within-block rotation at query time.
pub fn pre_shift(k_unsigned: usize, n1: usize, n: usize) -> usize {
    let j = giant_index(signed_diagonal(k_unsigned, n), n1);
    (n1 as i64 * j).rem_euclid(n as i64) as usize
}

/// Replicated block-packing enrollment. Groups of `N` vectors are packed at
/// stride `2N` (data blocks at even offsets, zero gaps at odd offsets),
/// each block pre-shifted right by `pre_shift(k)`. Every pair of aggregate
/// ciphertexts covers `M` consecutive groups, `M/2` per ciphertext.
pub fn pack_replicated(ctx: &HeContext, vectors: &[Vec<f64>], params: &LayoutParams) -> Result<PackedDatabase> {
    params.validate()?;
    check_input(ctx, vectors, params)?;
    if params.layout != Layout::ReplicatedStride2N {
        return Err(Error::WrongLayout {
            expected: Layout::ReplicatedStride2N.name().into(),
            found: params.layout.name().into(),
        });
    }
    let n = params.n();
    let m = params.blocks_per_ciphertext();
    let num_slots = params.num_slots;
    let groups = params.vector_group_count(vectors.len());
    let aggregates = params.aggregate_count(vectors.len());

    // Diagonals per vector group; padding rows are all-zero.
    let mut group_diagonals = Vec::with_capacity(groups);
    for g in 0..groups {
        let mut per_k = vec![vec![0.0; n]; n];
        for j in 0..n {
            if let Some(vec) = db_row(vectors, g * n + j) {
                for (k, diag) in per_k.iter_mut().enumerate() {
                    diag[j] = vec[(j + k) % n];
                }
            }
        }
        group_diagonals.push(per_k);
    }

    let mut diagonals = BTreeMap::new();
    let mut a = 0;
    while a < aggregates {
        let g0 = a * (m / 2);
        let g1 = (g0 + m).min(groups);
        #[allow(clippy::needless_range_loop)] // k indexes per-group diagonal tables
        for k in 0..n {
            let shift = pre_shift(k, params.n1, n);
            // Pack up to M consecutive groups contiguously, pre-shifted.
            let mut temp = vec![0.0; num_slots];
            for (b, g) in (g0..g1).enumerate() {
                let offset = b * n;
                for t in 0..n {
                    let src = (t + n - shift) % n;
                    temp[offset + t] = group_diagonals[g][k][src];
                }
            }
            // Redistribute at stride 2N: first half of the window into ctA,
            // second half into ctB.
            let mut plain_a = vec![0.0; num_slots];
            let mut plain_b = vec![0.0; num_slots];
            for b in 0..m / 2 {
                for t in 0..n {
                    plain_a[b * 2 * n + t] = temp[b * n + t];
                    plain_b[b * 2 * n + t] = temp[b * n + t + num_slots / 2];
                }
            }
            diagonals.insert((a, k), ctx.encrypt(&ctx.encode(&plain_a)?));
            if groups > (a + 1) * (m / 2) {
                diagonals.insert((a + 1, k), ctx.encrypt(&ctx.encode(&plain_b)?));
            }
        }
        a += 2;
    }

    Ok(PackedDatabase {
        params: *params,
        pre_rotation: PreRotation::PlainAtEnroll,
        vector_count: vectors.len(),
        group_count: aggregates,
        max_level: ctx.max_level(),
        diagonals,
    })
}

/// Normalize raw vectors and pack them under the requested layout. The
/// pre-rotated layout shifts each diagonal row before encryption, in one
/// pass.
pub fn enroll(ctx: &HeContext, raw_vectors: &[Vec<f64>], params: &LayoutParams) -> Result<PackedDatabase> {
    let normalized: Vec<Vec<f64>> = raw_vectors.iter().map(|v| normalize_l2(v)).collect::<Result<_>>()?;
    match params.layout {
        Layout::FlatConcat => pack_flat(ctx, &normalized, params),
        Layout::ReplicatedStride2N => pack_replicated(ctx, &normalized, params),
        Layout::FlatPreRotated => {
            check_input(ctx, &normalized, params)?;
            let rows = flat_diagonal_rows(&normalized, params);
            let mut diagonals = BTreeMap::new();
            for (m, per_k) in rows.iter().enumerate() {
                for (k, row) in per_k.iter().enumerate() {
                    let giant = (k / params.n1) * params.n1;
                    let shifted = rotate_right(row, giant % params.num_slots);
                    diagonals.insert((m, k), ctx.encrypt(&ctx.encode(&shifted)?));
                }
            }
            Ok(PackedDatabase {
                params: *params,
                pre_rotation: PreRotation::PlainAtEnroll,
                vector_count: normalized.len(),
                group_count: params.flat_group_count(normalized.len()),
                max_level: ctx.max_level(),
                diagonals,
            })
        }
    }
}

fn check_input(ctx: &HeContext, vectors: &[Vec<f64>], params: &LayoutParams) -> Result<()> {
    if ctx.num_slots() != params.num_slots {
        return Err(Error::Params(format!(
            "context has {} slots but layout expects {}",
            ctx.num_slots(),
            params.num_slots
        )));
    }
    if vectors.is_empty() {
        return Err(Error::Params("database must contain at least one vector".into()));
    }
    if vectors.iter().any(|v| v.len() != params.ell) {
        return Err(Error::Shape);
    }
    Ok(())
}

fn rotate_right(slots: &[f64], shift: usize) -> Vec<f64> {
    let n = slots.len();
    let s = shift % n;
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&slots[n - s..]);
    out.extend_from_slice(&slots[..n - s]);
    out
}

fn diagonal_file_name(k: usize, group: usize) -> String {
    format!("index{k}_group_{group}.bin")
}

/// Write the database as a header file plus one file per (diagonal, group).
pub fn serialize_db(db: &PackedDatabase, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;

    let mut header = ByteWriter::new();
    header.bytes(DB_MAGIC);
    header.u32(DB_FORMAT_VERSION);
    header.u64(db.params.ell as u64);
    header.u64(db.params.num_slots as u64);
    header.u64(db.vector_count as u64);
    header.u64(db.group_count as u64);
    header.u64(db.params.n1 as u64);
    header.u32(db.max_level);
    header.u8(db.params.layout.code());
    header.u8(db.pre_rotation.code());
    fs::write(dir.join("db.meta"), header.finish_with_crc())?;

    for (&(group, k), ct) in &db.diagonals {
        let mut w = ByteWriter::new();
        w.u64(ct.slots().len() as u64);
        for &s in ct.slots() {
            w.f64(s);
        }
        fs::write(dir.join(diagonal_file_name(k, group)), w.finish_with_crc())?;
    }
    Ok(())
}

/// Parsed `db.meta` contents.
#[derive(Debug, Clone, Copy)]
pub struct DbHeader {
    pub ell: usize,
    pub num_slots: usize,
    pub vector_count: usize,
    pub group_count: usize,
    pub n1: usize,
    pub max_level: u32,
    pub layout: Layout,
    pub pre_rotation: PreRotation,
}

pub fn read_header(dir: &Path) -> Result<DbHeader> {
    let bytes = fs::read(dir.join("db.meta"))?;
    parse_header(&bytes)
}

fn parse_header(bytes: &[u8]) -> Result<DbHeader> {
    if bytes.len() < 4 {
        return Err(Error::Format("header truncated".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32(body) != stored {
        return Err(Error::Format("header checksum mismatch".into()));
    }
    let mut r = ByteReader::new(body);
    let magic = r.bytes(8).ok_or_else(|| Error::Format("header truncated".into()))?;
    if magic != DB_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32().ok_or_else(|| Error::Format("header truncated".into()))?;
    if version != DB_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {DB_FORMAT_VERSION})"
        )));
    }
    let mut next_u64 = || r.u64().ok_or_else(|| Error::Format("header truncated".into()));
    let ell = next_u64()? as usize;
    let num_slots = next_u64()? as usize;
    let vector_count = next_u64()? as usize;
    let group_count = next_u64()? as usize;
    let n1 = next_u64()? as usize;
    let max_level = r.u32().ok_or_else(|| Error::Format("header truncated".into()))?;
    let layout = Layout::from_code(r.u8().ok_or_else(|| Error::Format("header truncated".into()))?)?;
    let pre_rotation =
        PreRotation::from_code(r.u8().ok_or_else(|| Error::Format("header truncated".into()))?)?;
    Ok(DbHeader { ell, num_slots, vector_count, group_count, n1, max_level, layout, pre_rotation })
}

/// Read one serialized diagonal ciphertext.
pub fn read_diagonal_file(ctx: &HeContext, dir: &Path, k: usize, group: usize, level: u32) -> Result<CipherVector> {
    let path = dir.join(diagonal_file_name(k, group));
    let bytes = fs::read(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingDiagonal { group, k }
        } else {
            Error::Io(e)
        }
    })?;
    if bytes.len() < 12 {
        return Err(Error::Format(format!("{} truncated", path.display())));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32(body) != stored {
        return Err(Error::Format(format!("{} checksum mismatch", path.display())));
    }
    let mut r = ByteReader::new(body);
    let count = r.u64().ok_or_else(|| Error::Format("diagonal file truncated".into()))? as usize;
    if count != ctx.num_slots() {
        return Err(Error::Format(format!(
            "diagonal file has {count} slots but the context expects {}",
            ctx.num_slots()
        )));
    }
    let mut slots = Vec::with_capacity(count);
    for _ in 0..count {
        slots.push(r.f64().ok_or_else(|| Error::Format("diagonal file truncated".into()))?);
    }
    Ok(ctx.cipher_from_slots(slots, level))
}

/// Load a serialized database back into memory; byte-exact inverse of
/// [`serialize_db`].
pub fn deserialize_db(ctx: &HeContext, dir: &Path) -> Result<PackedDatabase> {
    let header = read_header(dir)?;
    let params = LayoutParams::new(header.ell, header.num_slots, header.n1, header.layout)?;
    if ctx.num_slots() != params.num_slots {
        return Err(Error::Params(format!(
            "context has {} slots but database expects {}",
            ctx.num_slots(),
            params.num_slots
        )));
    }
    let diag_indices: Vec<usize> = (0..params.n()).collect();
    let mut diagonals = BTreeMap::new();
    for group in 0..header.group_count {
        for &k in &diag_indices {
            // Replicated layouts omit trailing ctB files with no data.
            let path = dir.join(diagonal_file_name(k, group));
            if header.layout == Layout::ReplicatedStride2N && !path.exists() {
                continue;
            }
            let ct = read_diagonal_file(ctx, dir, k, group, header.max_level)?;
            diagonals.insert((group, k), ct);
        }
    }
    Ok(PackedDatabase {
        params,
        pre_rotation: header.pre_rotation,
        vector_count: header.vector_count,
        group_count: header.group_count,
        max_level: header.max_level,
        diagonals,
    })
}
