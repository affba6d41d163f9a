//! End-to-end query protocols: membership, identification, aggregated
//! queries, ordered identification, and online database aggregation, plus
//! the synthetic dataset generator used as ground truth.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::backend::{CipherVector, HeContext, RotationKeyRegistry};
use crate::compare::ChebyshevComparator;
use crate::error::{Error, Result};
use crate::eval::{
    self, BsgsParams, EngineKind, HoistMode, ScoreMapping, ScoreSet,
};
use crate::packing::{normalize_l2, PackedDatabase};

/// An encrypted query ready for the engines: the replicated ciphertext,
/// whether it aggregates several embeddings, and the scale factor divided
/// out of it (1 for single queries).
#[derive(Debug)]
pub struct QueryBundle {
    cipher: CipherVector,
    plain: Vec<f64>,
    kind: QueryKind,
    scale_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Single,
    Aggregated(usize),
}

impl QueryBundle {
    pub fn cipher(&self) -> &CipherVector {
        &self.cipher
    }

    /// The scaled plaintext slots the cipher replicates (one period).
    pub fn plain(&self) -> &[f64] {
        &self.plain
    }

    pub fn kind(&self) -> QueryKind {
        self.kind
    }

    pub fn scale_factor(&self) -> f64 {
        self.scale_factor
    }
}

/// Normalize a single embedding and encrypt it replicated across blocks.
pub fn single_query(ctx: &HeContext, embedding: &[f64]) -> Result<QueryBundle> {
    let plain = normalize_l2(embedding)?;
    let cipher = eval::encrypt_replicated_query(ctx, &plain)?;
    Ok(QueryBundle { cipher, plain, kind: QueryKind::Single, scale_factor: 1.0 })
}

/// Query-aggregation scale factor `f = 1 + (gamma - 1) / sqrt(ell)`.
pub fn aggregate_scale_factor(gamma: usize, ell: usize) -> f64 {
    1.0 + (gamma as f64 - 1.0) / (ell as f64).sqrt()
}

/// Online database-aggregation scale factor
/// `f_G = 1 + (G - 1) * 2 / sqrt(ell)`.
pub fn online_scale_factor(groups: usize, ell: usize) -> f64 {
    1.0 + (groups as f64 - 1.0) * 2.0 / (ell as f64).sqrt()
}

/// Sum `gamma` normalized embeddings of distinct identities and divide by
/// the aggregation factor, so the comparison input stays inside `[-1, 1]`.
pub fn build_aggregate_query(ctx: &HeContext, embeddings: &[Vec<f64>]) -> Result<QueryBundle> {
    if embeddings.is_empty() {
        return Err(Error::EmptyAggregate);
    }
    let gamma = embeddings.len();
    let ell = embeddings[0].len();
    let f = aggregate_scale_factor(gamma, ell);
    let mut sum = vec![0.0; ell];
    for e in embeddings {
        let unit = normalize_l2(e)?;
        if unit.len() != ell {
            return Err(Error::Shape);
        }
        for (s, u) in sum.iter_mut().zip(&unit) {
            *s += u;
        }
    }
    for s in sum.iter_mut() {
        *s /= f;
    }
    let cipher = eval::encrypt_replicated_query(ctx, &sum)?;
    Ok(QueryBundle { cipher, plain: sum, kind: QueryKind::Aggregated(gamma), scale_factor: f })
}

/// Single query scaled down by `f_G` for online database aggregation.
pub fn online_scaled_query(ctx: &HeContext, embedding: &[f64], groups: usize) -> Result<QueryBundle> {
    let mut plain = normalize_l2(embedding)?;
    let f = online_scale_factor(groups, plain.len());
    for s in plain.iter_mut() {
        *s /= f;
    }
    let cipher = eval::encrypt_replicated_query(ctx, &plain)?;
    Ok(QueryBundle { cipher, plain, kind: QueryKind::Single, scale_factor: f })
}

/// Comparator configuration for the scenario drivers: the threshold on
/// unscaled scores and the series degree. The driver divides the threshold
/// by each bundle's scale factor.
#[derive(Debug, Clone, Copy)]
pub struct CompareConfig {
    pub tau: f64,
    pub degree: usize,
}

impl CompareConfig {
    pub fn comparator_for(&self, scale_factor: f64) -> Result<ChebyshevComparator> {
        ChebyshevComparator::with_degree(self.degree, self.tau / scale_factor)
    }
}

/// Engine dispatch context shared by the scenario drivers.
pub struct QueryEngine<'a> {
    pub ctx: &'a HeContext,
    pub engine: EngineKind,
    pub keys: &'a RotationKeyRegistry,
    pub n1: usize,
    pub workers: usize,
    pub chunk: usize,
}

impl QueryEngine<'_> {
    /// Run the selected similarity engine over the bundle.
    pub fn similarity(&self, db: &PackedDatabase, bundle: &QueryBundle) -> Result<ScoreSet> {
        let ell = db.params().ell;
        match self.engine {
            EngineKind::Hydia => {
                let params = BsgsParams::new(ell, ell)?;
                let table = eval::build_rotation_table(
                    self.ctx,
                    bundle.cipher(),
                    &params,
                    self.keys,
                    HoistMode::SingleHoist,
                )?;
                eval::hydia_similarity(self.ctx, db, &table)
            }
            EngineKind::BsgsDiagonal => {
                let params = BsgsParams::new(ell, self.n1)?;
                let table = eval::build_rotation_table(
                    self.ctx,
                    bundle.cipher(),
                    &params,
                    self.keys,
                    HoistMode::DoubleHoist,
                )?;
                eval::bsgs_diagonal_similarity(self.ctx, db, &table, self.workers)
            }
            EngineKind::GroupedBsgs => {
                let params = BsgsParams::new(ell, self.n1)?;
                eval::grouped_bsgs_similarity(self.ctx, db, bundle.cipher(), &params, self.keys)
            }
            EngineKind::SenderBlockPacked => {
                let params = BsgsParams::new(ell, self.n1)?;
                eval::sender_bsgs_block_packed(
                    self.ctx,
                    db,
                    bundle.cipher(),
                    &params,
                    self.keys,
                    self.chunk.max(1),
                )
            }
        }
    }
}

/// Membership outcome: the aggregated ciphertext whose slot 0 carries the
/// match count, and its decoded rounding.
#[derive(Debug)]
pub struct MembershipResult {
    pub cipher: CipherVector,
    pub raw_slot0: f64,
    pub decoded_count: i64,
    pub comparator_invocations: u64,
}

/// Identification outcome: per-group indicator rows and the decoded set of
/// matching database indices.
#[derive(Debug)]
pub struct IndexResult {
    pub per_group: Vec<Vec<f64>>,
    pub matched_indices: Vec<usize>,
    pub comparator_invocations: u64,
}

/// Threshold every score group, sum the indicator ciphertexts, then fold
/// all slots into slot 0. The decoded count approximates the number of
/// database vectors with score at least tau.
pub fn membership_query(
    engine: &QueryEngine<'_>,
    db: &PackedDatabase,
    bundle: &QueryBundle,
    cmp: &CompareConfig,
) -> Result<MembershipResult> {
    let ctx = engine.ctx;
    let scores = engine.similarity(db, bundle)?;
    let comparator = cmp.comparator_for(bundle.scale_factor())?;
    let mapping = scores.mapping();
    let mut indicators = Vec::with_capacity(scores.per_group().len());
    let mut invocations = 0u64;
    for ct in scores.per_group() {
        let masked = mask_gap_blocks(ctx, ct, mapping)?;
        indicators.push(comparator.eval(ctx, &masked)?);
        invocations += 1;
    }
    let summed = sum_ciphertexts(ctx, indicators)?;
    let total = ctx.eval_sum(&summed, ctx.num_slots(), engine.keys)?;
    let raw_slot0 = ctx.decrypt(&total)?.slots()[0];
    Ok(MembershipResult {
        cipher: total,
        raw_slot0,
        decoded_count: raw_slot0.round() as i64,
        comparator_invocations: invocations,
    })
}

/// Threshold every score group and decode the matching indices: slots at
/// least 0.5 count as matches.
pub fn index_query(
    engine: &QueryEngine<'_>,
    db: &PackedDatabase,
    bundle: &QueryBundle,
    cmp: &CompareConfig,
) -> Result<IndexResult> {
    let ctx = engine.ctx;
    let scores = engine.similarity(db, bundle)?;
    let comparator = cmp.comparator_for(bundle.scale_factor())?;
    let mut per_group = Vec::with_capacity(scores.per_group().len());
    let mut invocations = 0u64;
    for ct in scores.per_group() {
        let masked = mask_gap_blocks(ctx, ct, scores.mapping())?;
        let indicator = comparator.eval(ctx, &masked)?;
        per_group.push(ctx.decrypt(&indicator)?.into_slots());
        invocations += 1;
    }
    let mut matched = Vec::new();
    for v in 0..scores.vector_count() {
        let (g, s) = scores.slot_of(v);
        if per_group[g][s] >= 0.5 {
            matched.push(v);
        }
    }
    Ok(IndexResult { per_group, matched_indices: matched, comparator_invocations: invocations })
}

/// The replicated layout leaves within-block rotation residue in odd
/// N-blocks; zero those slots before the comparison so they cannot distort
/// counts. Flat layouts pass through untouched.
fn mask_gap_blocks(ctx: &HeContext, ct: &CipherVector, mapping: ScoreMapping) -> Result<CipherVector> {
    match mapping {
        ScoreMapping::Flat { .. } => Ok(ct.clone()),
        ScoreMapping::Replicated { n, .. } => {
            let mask: Vec<f64> = (0..ctx.num_slots())
                .map(|t| if (t / n) % 2 == 0 { 1.0 } else { 0.0 })
                .collect();
            let masked = ctx.mult_plain(ct, &ctx.encode(&mask)?)?;
            ctx.rescale(&masked)
        }
    }
}

fn sum_ciphertexts(ctx: &HeContext, mut cts: Vec<CipherVector>) -> Result<CipherVector> {
    let mut acc = cts.remove(0);
    for ct in &cts {
        let (a, b) = ctx.match_level(&acc, ct)?;
        acc = ctx.add(&a, &b)?;
    }
    Ok(acc)
}

/// Result of an ordered identification batch.
#[derive(Debug)]
pub struct OrderedIdentification {
    /// `(embedding index, database index)` pairs, sorted by embedding.
    pub assignments: Vec<(usize, usize)>,
    /// Number of index queries issued; always `2 * gamma`.
    pub queries_issued: usize,
}

/// Identify `gamma^2` embeddings of distinct identities with `2 * gamma`
/// aggregated index queries: `gamma` row aggregates over consecutive
/// blocks and `gamma` column aggregates over strided blocks. A database
/// identity matched by row `a` and column `b` is assigned embedding
/// `a * gamma + b`; identities matched in only one of the two blocks are
/// reported as ambiguous rather than guessed.
pub fn ordered_identification(
    engine: &QueryEngine<'_>,
    db: &PackedDatabase,
    embeddings: &[Vec<f64>],
    gamma: usize,
    cmp: &CompareConfig,
) -> Result<OrderedIdentification> {
    if gamma < 2 || embeddings.len() != gamma * gamma {
        return Err(Error::Config(format!(
            "ordered identification needs gamma^2 embeddings with gamma >= 2, got {} for gamma = {gamma}",
            embeddings.len()
        )));
    }
    let mut row_matches: Vec<Vec<usize>> = Vec::with_capacity(gamma);
    let mut col_matches: Vec<Vec<usize>> = Vec::with_capacity(gamma);
    let mut queries_issued = 0;
    for a in 0..gamma {
        let block: Vec<Vec<f64>> = (0..gamma).map(|b| embeddings[a * gamma + b].clone()).collect();
        let bundle = build_aggregate_query(engine.ctx, &block)?;
        row_matches.push(index_query(engine, db, &bundle, cmp)?.matched_indices);
        queries_issued += 1;
    }
    for b in 0..gamma {
        let block: Vec<Vec<f64>> = (0..gamma).map(|a| embeddings[a * gamma + b].clone()).collect();
        let bundle = build_aggregate_query(engine.ctx, &block)?;
        col_matches.push(index_query(engine, db, &bundle, cmp)?.matched_indices);
        queries_issued += 1;
    }

    let mut assignments = Vec::new();
    let mut seen: Vec<usize> = row_matches.iter().chain(&col_matches).flatten().copied().collect();
    seen.sort_unstable();
    seen.dedup();
    for k in seen {
        let rows: Vec<usize> = (0..gamma).filter(|&a| row_matches[a].contains(&k)).collect();
        let cols: Vec<usize> = (0..gamma).filter(|&b| col_matches[b].contains(&k)).collect();
        match (rows.as_slice(), cols.as_slice()) {
            (&[a], &[b]) => assignments.push((a * gamma + b, k)),
            (&[_], &[]) => return Err(Error::AmbiguousMatch { db_index: k, block: "row" }),
            (&[], &[_]) => return Err(Error::AmbiguousMatch { db_index: k, block: "column" }),
            _ => return Err(Error::AmbiguousMatch { db_index: k, block: "multiple" }),
        }
    }
    assignments.sort_unstable();
    Ok(OrderedIdentification { assignments, queries_issued })
}

/// Per-phase operation counts of an online-aggregation run, measured from
/// ledger snapshots around each phase.
#[derive(Debug, Clone, Copy)]
pub struct OnlineAggregationRun {
    pub merge_adds: u64,
    pub similarity_mults: u64,
    pub comparator_invocations: u64,
}

/// Membership over diagonals merged at query time: sum the encrypted
/// diagonals across all matrix groups (`ell * (G-1)` additions), evaluate
/// one aggregated score (`ell` multiplications), and run a single
/// comparison against the adjusted threshold `tau / f_G`. The query bundle
/// must be scaled by `f_G` (see [`online_scaled_query`]).
pub fn online_aggregated_membership(
    engine: &QueryEngine<'_>,
    db: &PackedDatabase,
    bundle: &QueryBundle,
    cmp: &CompareConfig,
) -> Result<(MembershipResult, OnlineAggregationRun)> {
    let ctx = engine.ctx;
    if db.params().layout != crate::packing::Layout::FlatConcat {
        return Err(Error::WrongLayout {
            expected: crate::packing::Layout::FlatConcat.name().into(),
            found: db.params().layout.name().into(),
        });
    }
    let ell = db.params().ell;
    let groups = db.group_count();

    // Phase 1: merge the encrypted diagonals across groups.
    let before_merge = ctx.ledger();
    let mut merged = Vec::with_capacity(ell);
    for i in 0..ell {
        let mut acc = db.diagonal(0, i)?.clone();
        for g in 1..groups {
            acc = ctx.add(&acc, db.diagonal(g, i)?)?;
        }
        merged.push(acc);
    }
    let merge_adds = ctx.ledger().since(&before_merge).ct_ct_adds;

    // Phase 2: rotation table and the single aggregated score.
    let params = BsgsParams::new(ell, engine.n1)?;
    let table =
        eval::build_rotation_table(ctx, bundle.cipher(), &params, engine.keys, HoistMode::DoubleHoist)?;
    let before_sim = ctx.ledger();
    let mut acc = ctx.mult_no_relin(&table.entries()[0], &merged[0])?;
    for (entry, diag) in table.entries().iter().zip(&merged).skip(1) {
        ctx.mul_acc(&mut acc, entry, diag)?;
    }
    let score = ctx.rescale(&ctx.relinearize(&acc))?;
    let similarity_mults = ctx.ledger().since(&before_sim).ct_ct_mults;

    // Phase 3: one comparison, then fold the slots.
    let comparator = cmp.comparator_for(bundle.scale_factor())?;
    let indicator = comparator.eval(ctx, &score)?;
    let total = ctx.eval_sum(&indicator, ctx.num_slots(), engine.keys)?;
    let raw_slot0 = ctx.decrypt(&total)?.slots()[0];

    let result = MembershipResult {
        cipher: total,
        raw_slot0,
        decoded_count: raw_slot0.round() as i64,
        comparator_invocations: 1,
    };
    Ok((result, OnlineAggregationRun { merge_adds, similarity_mults, comparator_invocations: 1 }))
}

/// Synthetic dataset with planted matches as ground truth. The query has
/// integer components uniform in `[-99, 99]`; planted vectors add integer
/// noise uniform in `[-2, 2]` to the query; the rest are independent
/// uniform integer vectors. Deterministic under the seed.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub vectors: Vec<Vec<f64>>,
    pub query: Vec<f64>,
    pub planted: Vec<usize>,
    pub seed: u64,
}

pub fn generate_synthetic_dataset(k: usize, k_m: usize, ell: usize, seed: u64) -> Result<SyntheticDataset> {
    if k_m > k || k == 0 {
        return Err(Error::Config(format!("need 0 <= K_m <= K with K > 0, got K = {k}, K_m = {k_m}")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let query: Vec<f64> = (0..ell).map(|_| rng.gen_range(-99..=99) as f64).collect();
    let mut planted: Vec<usize> = sample(&mut rng, k, k_m).into_vec();
    planted.sort_unstable();
    let mut vectors = Vec::with_capacity(k);
    for v in 0..k {
        if planted.binary_search(&v).is_ok() {
            vectors.push(query.iter().map(|q| q + rng.gen_range(-2..=2) as f64).collect());
        } else {
            vectors.push((0..ell).map(|_| rng.gen_range(-99..=99) as f64).collect());
        }
    }
    Ok(SyntheticDataset { vectors, query, planted, seed })
}

/// Batch for ordered identification: `gamma^2` identities planted at
/// distinct positions, and one noisy probe embedding per identity.
/// Embedding `e` belongs to database vector `planted[e]`.
#[derive(Debug, Clone)]
pub struct IdentificationBatch {
    pub vectors: Vec<Vec<f64>>,
    pub planted: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
}

pub fn generate_identification_batch(
    k: usize,
    gamma: usize,
    ell: usize,
    seed: u64,
) -> Result<IdentificationBatch> {
    let count = gamma * gamma;
    if count > k {
        return Err(Error::Config(format!("need gamma^2 = {count} planted identities within K = {k}")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Aggregation is only sound when every aggregate score stays inside the
    // scaled comparison interval and the match/non-match gap leaves room
    // for the comparator transition; resample (deterministically) until
    // the batch satisfies that operating condition.
    for _attempt in 0..200 {
        let vectors: Vec<Vec<f64>> =
            (0..k).map(|_| (0..ell).map(|_| rng.gen_range(-99..=99) as f64).collect()).collect();
        let planted: Vec<usize> = sample(&mut rng, k, count).into_vec();
        let embeddings: Vec<Vec<f64>> = planted
            .iter()
            .map(|&p| vectors[p].iter().map(|x| x + rng.gen_range(-2..=2) as f64).collect())
            .collect();
        let batch = IdentificationBatch { vectors, planted, embeddings };
        if gamma < 2 || batch_within_operating_range(&batch, gamma)? {
            return Ok(batch);
        }
    }
    Err(Error::Config(format!(
        "could not draw an identification batch within the aggregation operating range (K = {k}, gamma = {gamma}, ell = {ell}, seed = {seed})"
    )))
}

/// Check the aggregation operating condition: after dividing by the
/// aggregation factor, every aggregate score lies within (-0.98, 0.98) and
/// the match/non-match gap is at least 5% of the factor.
fn batch_within_operating_range(batch: &IdentificationBatch, gamma: usize) -> Result<bool> {
    let ell = batch.vectors[0].len();
    let f = aggregate_scale_factor(gamma, ell);
    let units: Vec<Vec<f64>> =
        batch.vectors.iter().map(|v| normalize_l2(v)).collect::<Result<_>>()?;
    let embeddings: Vec<Vec<f64>> =
        batch.embeddings.iter().map(|e| normalize_l2(e)).collect::<Result<_>>()?;
    let mut blocks: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    for a in 0..gamma {
        blocks.push(aggregate_block(&embeddings, &(0..gamma).map(|b| a * gamma + b).collect::<Vec<_>>(), ell));
    }
    for b in 0..gamma {
        blocks.push(aggregate_block(&embeddings, &(0..gamma).map(|a| a * gamma + b).collect::<Vec<_>>(), ell));
    }
    let mut match_min = f64::INFINITY;
    let mut other_max = f64::NEG_INFINITY;
    let mut extreme: f64 = 0.0;
    for (members, agg) in &blocks {
        for (v, unit) in units.iter().enumerate() {
            let score: f64 = unit.iter().zip(agg).map(|(x, y)| x * y).sum();
            extreme = extreme.max(score.abs());
            if members.iter().any(|&e| batch.planted[e] == v) {
                match_min = match_min.min(score);
            } else {
                other_max = other_max.max(score.abs());
            }
        }
    }
    Ok(extreme <= 0.98 * f && match_min - other_max >= 0.05 * f)
}

/// Midpoint of the gap between the lowest aggregate-match score and the
/// highest aggregate-non-match score across all row and column aggregates
/// of an identification batch. Scores are unscaled sums of normalized
/// embeddings against normalized database rows, matching how the drivers
/// divide the threshold by the aggregation factor.
pub fn auto_threshold_for_batch(batch: &IdentificationBatch, gamma: usize) -> Result<f64> {
    let units: Vec<Vec<f64>> =
        batch.vectors.iter().map(|v| normalize_l2(v)).collect::<Result<_>>()?;
    let embeddings: Vec<Vec<f64>> =
        batch.embeddings.iter().map(|e| normalize_l2(e)).collect::<Result<_>>()?;
    let mut match_min = f64::INFINITY;
    let mut other_max = f64::NEG_INFINITY;
    let mut blocks: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    let ell = batch.vectors[0].len();
    for a in 0..gamma {
        let members: Vec<usize> = (0..gamma).map(|b| a * gamma + b).collect();
        blocks.push(aggregate_block(&embeddings, &members, ell));
    }
    for b in 0..gamma {
        let members: Vec<usize> = (0..gamma).map(|a| a * gamma + b).collect();
        blocks.push(aggregate_block(&embeddings, &members, ell));
    }
    for (members, agg) in &blocks {
        for (v, unit) in units.iter().enumerate() {
            let score: f64 = unit.iter().zip(agg).map(|(x, y)| x * y).sum();
            let is_match = members.iter().any(|&e| batch.planted[e] == v);
            if is_match {
                match_min = match_min.min(score);
            } else {
                other_max = other_max.max(score);
            }
        }
    }
    if match_min <= other_max {
        return Err(Error::Config(format!(
            "no separating threshold for the batch: lowest match {match_min} below highest non-match {other_max}"
        )));
    }
    Ok((match_min + other_max) / 2.0)
}

fn aggregate_block(embeddings: &[Vec<f64>], members: &[usize], ell: usize) -> (Vec<usize>, Vec<f64>) {
    let mut agg = vec![0.0; ell];
    for &e in members {
        for (a, x) in agg.iter_mut().zip(&embeddings[e]) {
            *a += x;
        }
    }
    (members.to_vec(), agg)
}

/// Midpoint of the gap between the lowest planted-match score and the
/// highest non-match score, both on normalized vectors. With no planted
/// matches, the midpoint between the highest non-match score and 1.
pub fn auto_threshold(dataset: &SyntheticDataset) -> Result<f64> {
    let q = normalize_l2(&dataset.query)?;
    let mut match_min = f64::INFINITY;
    let mut other_max = f64::NEG_INFINITY;
    for (v, row) in dataset.vectors.iter().enumerate() {
        let unit = normalize_l2(row)?;
        let score: f64 = unit.iter().zip(&q).map(|(a, b)| a * b).sum();
        if dataset.planted.binary_search(&v).is_ok() {
            match_min = match_min.min(score);
        } else {
            other_max = other_max.max(score);
        }
    }
    if dataset.planted.is_empty() {
        return Ok((other_max + 1.0) / 2.0);
    }
    if match_min <= other_max {
        return Err(Error::Config(format!(
            "no separating threshold: lowest match {match_min} below highest non-match {other_max}"
        )));
    }
    Ok((match_min + other_max) / 2.0)
}
