//! Encrypted similarity engines.
//!
//! All four engines compute the same per-vector cosine scores via the
//! diagonal decomposition `(M q)[t] = sum_k diag_k[t] * q[(t+k) mod ell]`,
//! but differ in how query rotations are produced and which rotation keys
//! they need:
//!
//! - [`hydia_similarity`]: full rotation table (single hoisting, keys
//!   `{1..ell-1}`), one pass over the diagonals per matrix group;
//! - [`bsgs_diagonal_similarity`]: the same evaluation over a table built
//!   by baby/giant composition (double hoisting, keys
//!   `S_baby ∪ S_giant`), with worker-partitioned incremental
//!   accumulation;
//! - [`grouped_bsgs_similarity`]: on-demand giant-step rotations over
//!   pre-rotated diagonals, `(n1-1) + G(n2-1)` rotations in total;
//! - [`sender_bsgs_block_packed`]: the replicated stride-2N layout with
//!   signed diagonal indices and within-block giant rotations.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;

use crate::backend::{CipherVector, HeContext, RotationKeyRegistry};
use crate::error::{Error, Result};
use crate::packing::{self, DbHeader, Layout, LayoutParams, PackedDatabase, PreRotation};

/// Engine selector shared by the scenario drivers, cost calculators and
/// the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineKind {
    Hydia,
    BsgsDiagonal,
    GroupedBsgs,
    SenderBlockPacked,
}

impl EngineKind {
    pub fn name(self) -> &'static str {
        match self {
            EngineKind::Hydia => "hydia",
            EngineKind::BsgsDiagonal => "bsgs-diagonal",
            EngineKind::GroupedBsgs => "grouped-bsgs",
            EngineKind::SenderBlockPacked => "sender",
        }
    }

    /// The layout this engine consumes.
    pub fn layout(self) -> Layout {
        match self {
            EngineKind::Hydia | EngineKind::BsgsDiagonal => Layout::FlatConcat,
            EngineKind::GroupedBsgs => Layout::FlatPreRotated,
            EngineKind::SenderBlockPacked => Layout::ReplicatedStride2N,
        }
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hydia" => Ok(EngineKind::Hydia),
            "bsgs-diagonal" => Ok(EngineKind::BsgsDiagonal),
            "grouped-bsgs" => Ok(EngineKind::GroupedBsgs),
            "sender" => Ok(EngineKind::SenderBlockPacked),
            other => Err(Error::Config(format!("unknown engine '{other}'"))),
        }
    }
}

/// Baby-step/giant-step factorization of the diagonal indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BsgsParams {
    pub ell: usize,
    pub n1: usize,
}

impl BsgsParams {
    pub fn new(ell: usize, n1: usize) -> Result<Self> {
        if n1 == 0 || n1 > ell {
            return Err(Error::Params(format!("n1 must satisfy 1 <= n1 <= ell, got {n1}")));
        }
        Ok(BsgsParams { ell, n1 })
    }

    /// Giant-step count `n2 = ceil(ell / n1)`; `n1 * n2 >= ell`.
    pub fn n2(&self) -> usize {
        self.ell.div_ceil(self.n1)
    }

    /// Baby offsets `{1, ..., n1-1}`.
    pub fn baby_offsets(&self) -> impl Iterator<Item = i64> {
        1..self.n1 as i64
    }

    /// Giant offsets `{n1, 2*n1, ..., (n2-1)*n1}`.
    pub fn giant_offsets(&self) -> impl Iterator<Item = i64> {
        let n1 = self.n1 as i64;
        (1..self.n2() as i64).map(move |j| j * n1)
    }

    /// Signed giant indices for the block-packed sender, covering every
    /// signed diagonal in `[-N/2, N/2)`. A one-slot block degenerates to
    /// the single diagonal k = 0 under giant step 0.
    pub fn signed_giants(&self, n: usize) -> impl Iterator<Item = i64> {
        if n == 1 {
            return 0..=0;
        }
        let n1 = self.n1 as i64;
        let lo = (-(n as i64) / 2).div_euclid(n1);
        let hi = (n as i64 / 2 - 1).div_euclid(n1);
        lo..=hi
    }

    /// Valid baby range `[i_lo, i_hi]` of a signed giant step, or `None`
    /// when no diagonal index of the step falls inside `[-N/2, N/2)`.
    pub fn signed_giant_range(&self, j: i64, n: usize) -> Option<(i64, i64)> {
        if n == 1 {
            return (j == 0).then_some((0, 0));
        }
        let n1 = self.n1 as i64;
        let half = n as i64 / 2;
        let lo = 0.max(-j * n1 - half);
        let hi = (n1 - 1).min(half - 1 - j * n1);
        (lo <= hi).then_some((lo, hi))
    }
}

/// How a rotation table was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HoistMode {
    /// One hoisting handle on the query; direct rotations by every index.
    SingleHoist,
    /// Baby rotations from the query handle, remaining entries composed
    /// from per-baby handles and giant offsets.
    DoubleHoist,
}

/// All `ell` rotations of the query ciphertext, entry `i` holding the
/// query rotated left by `i`.
#[derive(Debug)]
pub struct RotationTable {
    entries: Vec<CipherVector>,
    built_with: HoistMode,
}

impl RotationTable {
    pub fn entries(&self) -> &[CipherVector] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn built_with(&self) -> HoistMode {
        self.built_with
    }
}

/// Tile an `ell`-dimensional query across the whole slot vector, one copy
/// per `ell`-sized block, and encrypt it.
pub fn encrypt_replicated_query(ctx: &HeContext, query: &[f64]) -> Result<CipherVector> {
    let ell = query.len();
    if ell == 0 || !ctx.num_slots().is_multiple_of(ell) {
        return Err(Error::Params(format!(
            "query dimension {ell} must divide the slot count {}",
            ctx.num_slots()
        )));
    }
    let tiled: Vec<f64> = (0..ctx.num_slots()).map(|t| query[t % ell]).collect();
    Ok(ctx.encrypt(&ctx.encode(&tiled)?))
}

/// Precompute all `ell` query rotations. With [`HoistMode::SingleHoist`]
/// every index is rotated from one handle on the query; with
/// [`HoistMode::DoubleHoist`] only baby indices come from the query handle
/// and the rest are composed as `Rot_{b1*n1}(rotQ[b2])` from per-baby
/// handles, so only the baby and giant key sets are needed. Either way the
/// table costs `ell - 1` hoisted rotations.
pub fn build_rotation_table(
    ctx: &HeContext,
    query: &CipherVector,
    params: &BsgsParams,
    keys: &RotationKeyRegistry,
    mode: HoistMode,
) -> Result<RotationTable> {
    let ell = params.ell;
    let mut entries = Vec::with_capacity(ell);
    entries.push(query.clone());
    match mode {
        HoistMode::SingleHoist => {
            let handle = ctx.hoist_precompute(query)?;
            for i in 1..ell {
                entries.push(ctx.hoisted_rotate(&handle, i as i64, keys)?);
            }
        }
        HoistMode::DoubleHoist => {
            let n1 = params.n1.min(ell);
            let handle = ctx.hoist_precompute(query)?;
            for i in 1..n1 {
                entries.push(ctx.hoisted_rotate(&handle, i as i64, keys)?);
            }
            let baby_handles: Vec<_> =
                entries.iter().map(|ct| ctx.hoist_precompute(ct)).collect::<Result<_>>()?;
            for i in n1..ell {
                let (b1, b2) = (i / n1, i % n1);
                entries.push(ctx.hoisted_rotate(&baby_handles[b2], (b1 * n1) as i64, keys)?);
            }
        }
    }
    Ok(RotationTable { entries, built_with: mode })
}

/// Slot placement of the per-vector scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMapping {
    /// Vector `v` scores at slot `v mod num_slots` of group `v / num_slots`.
    Flat { num_slots: usize },
    /// Vector `v` scores in aggregate `(v/N) / (M/2)` at slot
    /// `((v/N) mod (M/2)) * 2N + (v mod N)`; odd `N`-blocks are gaps.
    Replicated { n: usize, blocks_per_aggregate: usize },
}

/// Per-group score ciphertexts with their slot mapping.
#[derive(Debug)]
pub struct ScoreSet {
    per_group: Vec<CipherVector>,
    mapping: ScoreMapping,
    vector_count: usize,
}

impl ScoreSet {
    pub fn per_group(&self) -> &[CipherVector] {
        &self.per_group
    }

    pub fn into_per_group(self) -> Vec<CipherVector> {
        self.per_group
    }

    pub fn mapping(&self) -> ScoreMapping {
        self.mapping
    }

    pub fn vector_count(&self) -> usize {
        self.vector_count
    }

    /// (group, slot) holding the score of database vector `v`.
    pub fn slot_of(&self, v: usize) -> (usize, usize) {
        match self.mapping {
            ScoreMapping::Flat { num_slots } => (v / num_slots, v % num_slots),
            ScoreMapping::Replicated { n, blocks_per_aggregate } => {
                let group = v / n;
                (group / blocks_per_aggregate, (group % blocks_per_aggregate) * 2 * n + v % n)
            }
        }
    }

    /// Decrypt every valid score slot, in database order.
    pub fn decode_scores(&self, ctx: &HeContext) -> Result<Vec<f64>> {
        let plains: Vec<_> =
            self.per_group.iter().map(|ct| ctx.decrypt(ct)).collect::<Result<_>>()?;
        (0..self.vector_count)
            .map(|v| {
                let (g, s) = self.slot_of(v);
                Ok(plains[g].slots()[s])
            })
            .collect()
    }
}

fn require_layout(db: &PackedDatabase, expected: Layout) -> Result<()> {
    if db.params().layout != expected {
        return Err(Error::WrongLayout {
            expected: expected.name().into(),
            found: db.params().layout.name().into(),
        });
    }
    Ok(())
}

/// Accumulate `sum_i table[i] (*) diag(m, i)` for one flat matrix group,
/// splitting the diagonal range across `workers` running accumulators that
/// are merged pairwise in a fixed order. Exactly `ell` multiplications and
/// `ell - 1` additions regardless of the worker count; one relinearization
/// and one rescale finish the group.
fn accumulate_flat_group(
    ctx: &HeContext,
    db: &PackedDatabase,
    table: &RotationTable,
    group: usize,
    workers: usize,
) -> Result<CipherVector> {
    let ell = db.params().ell;
    let workers = workers.clamp(1, ell);
    let chunk = ell.div_ceil(workers);
    let ranges: Vec<_> = (0..ell).step_by(chunk).map(|lo| lo..(lo + chunk).min(ell)).collect();

    let mut accs: Vec<CipherVector> = if ranges.len() == 1 {
        vec![fold_products(ctx, db, table, group, ranges[0].clone())?]
    } else {
        ranges
            .into_par_iter()
            .map(|r| fold_products(ctx, db, table, group, r))
            .collect::<Result<_>>()?
    };

    // Tree reduction over the per-worker accumulators, merging in place so
    // no additional degree-2 ciphertexts are created.
    while accs.len() > 1 {
        let mut next = Vec::with_capacity(accs.len().div_ceil(2));
        let mut it = accs.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                ctx.add_assign(&mut a, &b)?;
            }
            next.push(a);
        }
        accs = next;
    }
    let total = accs.pop().expect("at least one accumulator");
    let lin = ctx.relinearize(&total);
    ctx.rescale(&lin)
}

fn fold_products(
    ctx: &HeContext,
    db: &PackedDatabase,
    table: &RotationTable,
    group: usize,
    range: std::ops::Range<usize>,
) -> Result<CipherVector> {
    let mut iter = range;
    let first = iter.next().expect("non-empty chunk");
    let mut acc = ctx.mult_no_relin(&table.entries()[first], db.diagonal(group, first)?)?;
    for i in iter {
        ctx.mul_acc(&mut acc, &table.entries()[i], db.diagonal(group, i)?)?;
    }
    Ok(acc)
}

/// Diagonal-method similarity over the flat layout: per matrix group,
/// `ell` ct-ct multiplications without relinearization, `ell - 1`
/// additions, one relinearization and one rescale.
pub fn hydia_similarity(ctx: &HeContext, db: &PackedDatabase, table: &RotationTable) -> Result<ScoreSet> {
    require_layout(db, Layout::FlatConcat)?;
    check_table(db, table)?;
    let mut per_group = Vec::with_capacity(db.group_count());
    for m in 0..db.group_count() {
        per_group.push(accumulate_flat_group(ctx, db, table, m, 1)?);
    }
    Ok(ScoreSet {
        per_group,
        mapping: ScoreMapping::Flat { num_slots: db.params().num_slots },
        vector_count: db.vector_count(),
    })
}

/// Same evaluation and operation counts as [`hydia_similarity`], with the
/// diagonal range of each group partitioned across `workers` running
/// accumulators. A single worker reproduces the flat engine bit for bit;
/// the peak number of live degree-2 ciphertexts stays at `workers`.
pub fn bsgs_diagonal_similarity(
    ctx: &HeContext,
    db: &PackedDatabase,
    table: &RotationTable,
    workers: usize,
) -> Result<ScoreSet> {
    require_layout(db, Layout::FlatConcat)?;
    check_table(db, table)?;
    let mut per_group = Vec::with_capacity(db.group_count());
    for m in 0..db.group_count() {
        per_group.push(accumulate_flat_group(ctx, db, table, m, workers)?);
    }
    Ok(ScoreSet {
        per_group,
        mapping: ScoreMapping::Flat { num_slots: db.params().num_slots },
        vector_count: db.vector_count(),
    })
}

fn check_table(db: &PackedDatabase, table: &RotationTable) -> Result<()> {
    if table.len() != db.params().ell {
        return Err(Error::Params(format!(
            "rotation table has {} entries but the database needs {}",
            table.len(),
            db.params().ell
        )));
    }
    if let Some(e) = table.entries().first() {
        if e.level() != db.max_level() {
            return Err(Error::LevelMismatch { a: e.level(), b: db.max_level() });
        }
    }
    Ok(())
}

/// Grouped BSGS over pre-rotated flat diagonals: per giant step, accumulate
/// up to `n1` baby products, relinearize, rescale, and apply one on-demand
/// giant rotation to the sum. Because the stored diagonals already carry
/// the `Rot_{-j*n1}` offset across the full slot row and the replicated
/// query is `ell`-periodic, the single full-ciphertext rotation lands every
/// square's partial result exactly.
pub fn grouped_bsgs_similarity(
    ctx: &HeContext,
    db: &PackedDatabase,
    query: &CipherVector,
    params: &BsgsParams,
    keys: &RotationKeyRegistry,
) -> Result<ScoreSet> {
    require_layout(db, Layout::FlatPreRotated)?;
    if db.pre_rotation() == PreRotation::None {
        return Err(Error::UnrotatedDatabase);
    }
    if params.n1 != db.params().n1 {
        return Err(Error::Params(format!(
            "engine n1 = {} does not match the database pre-rotation n1 = {}",
            params.n1,
            db.params().n1
        )));
    }
    let ell = params.ell;
    let n1 = params.n1;

    let handle = ctx.hoist_precompute(query)?;
    let mut baby = Vec::with_capacity(n1);
    baby.push(query.clone());
    for i in 1..n1.min(ell) {
        baby.push(ctx.hoisted_rotate(&handle, i as i64, keys)?);
    }

    let mut per_group = Vec::with_capacity(db.group_count());
    for m in 0..db.group_count() {
        let mut acc: Option<CipherVector> = None;
        for j in 0..params.n2() {
            let lo = j * n1;
            let count = n1.min(ell - lo);
            let mut sum = ctx.mult_no_relin(&baby[0], db.diagonal(m, lo)?)?;
            for (i, rotated) in baby.iter().enumerate().take(count).skip(1) {
                ctx.mul_acc(&mut sum, rotated, db.diagonal(m, lo + i)?)?;
            }
            let mut sum = ctx.rescale(&ctx.relinearize(&sum))?;
            if j > 0 {
                sum = ctx.rotate(&sum, (j * n1) as i64, keys)?;
            }
            acc = Some(match acc {
                Some(a) => ctx.add(&a, &sum)?,
                None => sum,
            });
        }
        per_group.push(acc.expect("at least one giant step"));
    }
    Ok(ScoreSet {
        per_group,
        mapping: ScoreMapping::Flat { num_slots: db.params().num_slots },
        vector_count: db.vector_count(),
    })
}

/// Rotate every data block of a stride-2N ciphertext left by `s` using two
/// full rotations and one addition. The input must have zero gap blocks;
/// the output's gap blocks carry residue and must not be read.
pub fn rotate_within_block(
    ctx: &HeContext,
    x: &CipherVector,
    s: usize,
    n: usize,
    keys: &RotationKeyRegistry,
) -> Result<CipherVector> {
    if s >= n {
        return Err(Error::RotationOutOfRange { s: s as i64, n });
    }
    if s == 0 {
        return Ok(x.clone());
    }
    let a = ctx.rotate(x, s as i64, keys)?;
    let b = ctx.rotate(x, s as i64 - n as i64, keys)?;
    ctx.add(&a, &b)
}

/// Source of replicated block-packed diagonal ciphertexts: either an
/// in-memory [`PackedDatabase`] or a directory of serialized files loaded
/// lazily and dropped after use.
pub trait DiagonalStore {
    fn layout(&self) -> LayoutParams;
    fn pre_rotation(&self) -> PreRotation;
    fn vector_count(&self) -> usize;
    fn group_count(&self) -> usize;
    fn max_level(&self) -> u32;
    fn fetch(&self, ctx: &HeContext, group: usize, k: usize) -> Result<CipherVector>;
}

impl DiagonalStore for PackedDatabase {
    fn layout(&self) -> LayoutParams {
        *self.params()
    }

    fn pre_rotation(&self) -> PreRotation {
        PackedDatabase::pre_rotation(self)
    }

    fn vector_count(&self) -> usize {
        PackedDatabase::vector_count(self)
    }

    fn group_count(&self) -> usize {
        PackedDatabase::group_count(self)
    }

    fn max_level(&self) -> u32 {
        PackedDatabase::max_level(self)
    }

    fn fetch(&self, _ctx: &HeContext, group: usize, k: usize) -> Result<CipherVector> {
        self.diagonal(group, k).cloned()
    }
}

/// Lazy disk-backed store over a serialized database directory.
#[derive(Debug)]
pub struct DiskDb {
    dir: PathBuf,
    header: DbHeader,
}

impl DiskDb {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let header = packing::read_header(&dir)?;
        Ok(DiskDb { dir, header })
    }

    pub fn header(&self) -> &DbHeader {
        &self.header
    }
}

impl DiagonalStore for DiskDb {
    fn layout(&self) -> LayoutParams {
        LayoutParams {
            ell: self.header.ell,
            num_slots: self.header.num_slots,
            n1: self.header.n1,
            layout: self.header.layout,
        }
    }

    fn pre_rotation(&self) -> PreRotation {
        self.header.pre_rotation
    }

    fn vector_count(&self) -> usize {
        self.header.vector_count
    }

    fn group_count(&self) -> usize {
        self.header.group_count
    }

    fn max_level(&self) -> u32 {
        self.header.max_level
    }

    fn fetch(&self, ctx: &HeContext, group: usize, k: usize) -> Result<CipherVector> {
        packing::read_diagonal_file(ctx, &self.dir, k, group, self.header.max_level)
    }
}

/// Query processing over the replicated stride-2N layout with signed
/// diagonal indices. For each aggregate and signed giant step `j`, the
/// valid baby range keeps `j*n1 + i` inside `[-N/2, N/2)`; diagonals are
/// fetched in chunks of `chunk` and dropped after use, each giant sum is
/// relinearized and rescaled once, then aligned by a within-block rotation
/// of `(n1*j) mod N`.
pub fn sender_bsgs_block_packed(
    ctx: &HeContext,
    store: &dyn DiagonalStore,
    query: &CipherVector,
    params: &BsgsParams,
    keys: &RotationKeyRegistry,
    chunk: usize,
) -> Result<ScoreSet> {
    let layout = store.layout();
    if layout.layout != Layout::ReplicatedStride2N {
        return Err(Error::WrongLayout {
            expected: Layout::ReplicatedStride2N.name().into(),
            found: layout.layout.name().into(),
        });
    }
    if params.n1 != layout.n1 {
        return Err(Error::Params(format!(
            "engine n1 = {} does not match the enrolled n1 = {}",
            params.n1, layout.n1
        )));
    }
    let n = layout.n();
    let n1 = params.n1 as i64;
    let chunk = chunk.max(1);

    let handle = ctx.hoist_precompute(query)?;
    let mut baby = Vec::with_capacity(params.n1);
    baby.push(query.clone());
    for i in 1..params.n1 {
        baby.push(ctx.hoisted_rotate(&handle, i as i64, keys)?);
    }

    let mut per_group = Vec::with_capacity(store.group_count());
    for g in 0..store.group_count() {
        let mut acc: Option<CipherVector> = None;
        for j in params.signed_giants(n) {
            let Some((i_lo, i_hi)) = params.signed_giant_range(j, n) else {
                continue; // no valid diagonal index in this giant step
            };
            let mut giant_sum: Option<CipherVector> = None;
            let indices: Vec<i64> = (i_lo..=i_hi).collect();
            for chunk_indices in indices.chunks(chunk) {
                let mut partial: Option<CipherVector> = None;
                for &i in chunk_indices {
                    let k_signed = j * n1 + i;
                    let k_unsigned = k_signed.rem_euclid(n as i64) as usize;
                    let diagonal = store.fetch(ctx, g, k_unsigned)?;
                    match partial.as_mut() {
                        Some(p) => ctx.mul_acc(p, &baby[i as usize], &diagonal)?,
                        None => partial = Some(ctx.mult_no_relin(&baby[i as usize], &diagonal)?),
                    }
                }
                let partial = partial.expect("chunks are non-empty");
                giant_sum = Some(match giant_sum {
                    Some(s) => ctx.add(&s, &partial)?,
                    None => partial,
                });
            }
            let giant_sum = giant_sum.expect("valid range produces a sum");
            let rescaled = ctx.rescale(&ctx.relinearize(&giant_sum))?;
            let pre_rot = (n1 * j).rem_euclid(n as i64) as usize;
            let aligned = rotate_within_block(ctx, &rescaled, pre_rot, n, keys)?;
            acc = Some(match acc {
                Some(a) => ctx.add(&a, &aligned)?,
                None => aligned,
            });
        }
        // The group result is already degree 1; the trailing
        // relinearization of the accumulator is a no-op and not charged.
        let acc = acc.ok_or(Error::MissingDiagonal { group: g, k: 0 })?;
        per_group.push(ctx.relinearize(&acc));
    }

    Ok(ScoreSet {
        per_group,
        mapping: ScoreMapping::Replicated {
            n,
            blocks_per_aggregate: layout.blocks_per_ciphertext() / 2,
        },
        vector_count: store.vector_count(),
    })
}
