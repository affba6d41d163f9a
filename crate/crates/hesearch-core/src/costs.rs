//! Closed-form operation/key-count predictions and ledger reconciliation.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::backend::{LedgerSnapshot, DEFAULT_KEY_BYTES};
use crate::error::{Error, Result};
use crate::eval::{BsgsParams, EngineKind};

/// Rotation offsets an engine needs, plus the power-of-two offsets
/// `{1, 2, ..., span/2}` for a slot-summing span (`span <= 1` adds none).
///
/// - flat diagonal rotations need `{1, ..., ell-1}`;
/// - BSGS table builds and the grouped engine need
///   `S_baby = {1, ..., n1-1}` and `S_giant = {n1, 2n1, ..., (n2-1)n1}`;
/// - the block-packed sender needs `S_baby` plus, for every giant step with
///   a nonzero pre-shift `s`, the pair `{s, s - N}`.
pub fn key_set_for(engine: EngineKind, ell: usize, n1: usize, eval_sum_span: usize) -> BTreeSet<i64> {
    let mut offsets = BTreeSet::new();
    match engine {
        EngineKind::Hydia => {
            offsets.extend(1..ell as i64);
        }
        EngineKind::BsgsDiagonal | EngineKind::GroupedBsgs => {
            let params = BsgsParams { ell, n1 };
            offsets.extend(params.baby_offsets());
            offsets.extend(params.giant_offsets());
        }
        EngineKind::SenderBlockPacked => {
            let params = BsgsParams { ell, n1 };
            offsets.extend(params.baby_offsets());
            let n = ell;
            for j in params.signed_giants(n) {
                if params.signed_giant_range(j, n).is_none() {
                    continue;
                }
                let s = (n1 as i64 * j).rem_euclid(n as i64);
                if s != 0 {
                    offsets.insert(s);
                    offsets.insert(s - n as i64);
                }
            }
        }
    }
    let mut step = 1usize;
    while step * 2 <= eval_sum_span {
        offsets.insert(step as i64);
        step *= 2;
    }
    offsets
}

/// What a prediction describes, so measured runs can be matched to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ScenarioDesc {
    pub engine: &'static str,
    pub ell: usize,
    pub n1: usize,
    pub n2: usize,
    pub groups: usize,
}

/// Closed-form per-query operation counts for a similarity run (rotation
/// table or baby rotations included), plus the rotation-key census.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CostPrediction {
    pub scenario: ScenarioDesc,
    pub rotations: u64,
    pub ct_ct_mults: u64,
    pub ct_ct_adds: u64,
    pub relins: u64,
    pub rescales: u64,
    pub rotation_keys: u64,
    pub key_memory_bytes: u64,
}

/// Predict the similarity-phase costs of `engine` over `groups` matrix
/// groups (aggregates for the sender). Keys are counted without any
/// slot-summing span; memory uses the default per-key footprint.
pub fn predict_costs(engine: EngineKind, ell: usize, n1: usize, groups: usize) -> CostPrediction {
    let params = BsgsParams { ell, n1 };
    let n2 = params.n2();
    let g = groups as u64;
    let l = ell as u64;
    let (rotations, mults, adds, relins, rescales) = match engine {
        // Full rotation table once, then per group: ell products summed
        // with one relinearization and one rescale.
        EngineKind::Hydia | EngineKind::BsgsDiagonal => (l - 1, g * l, g * (l - 1), g, g),
        // Baby rotations once, one on-demand rotation per giant step and
        // group; each giant sum is relinearized and rescaled.
        EngineKind::GroupedBsgs => (
            (n1 as u64 - 1) + g * (n2 as u64 - 1),
            g * l,
            g * (l - 1),
            g * n2 as u64,
            g * n2 as u64,
        ),
        EngineKind::SenderBlockPacked => {
            let n = ell;
            let mut product_count = 0u64;
            let mut product_adds = 0u64;
            let mut giant_steps = 0u64;
            let mut within_block = 0u64; // giant steps with a nonzero pre-shift
            for j in params.signed_giants(n) {
                let Some((lo, hi)) = params.signed_giant_range(j, n) else { continue };
                giant_steps += 1;
                let count = (hi - lo + 1) as u64;
                product_count += count;
                product_adds += count - 1;
                if (n1 as i64 * j).rem_euclid(n as i64) != 0 {
                    within_block += 1;
                }
            }
            let per_group_adds = product_adds + within_block + (giant_steps - 1);
            (
                (n1 as u64 - 1) + g * 2 * within_block,
                g * product_count,
                g * per_group_adds,
                g * giant_steps,
                g * giant_steps,
            )
        }
    };
    let keys = key_set_for(engine, ell, n1, 1).len() as u64;
    CostPrediction {
        scenario: ScenarioDesc { engine: engine.name(), ell, n1, n2, groups },
        rotations,
        ct_ct_mults: mults,
        ct_ct_adds: adds,
        relins,
        rescales,
        rotation_keys: keys,
        key_memory_bytes: keys * DEFAULT_KEY_BYTES,
    }
}

/// Online database aggregation versus the per-group baseline:
/// `ell` multiplications, `ell(G-1)` diagonal-merge additions and one
/// comparison, against `ell*G` multiplications and `G` comparisons.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OnlineAggregationCosts {
    pub merged_mults: u64,
    pub merge_adds: u64,
    pub merged_comparisons: u64,
    pub baseline_mults: u64,
    pub baseline_comparisons: u64,
}

pub fn predict_online_aggregation(ell: usize, groups: usize) -> OnlineAggregationCosts {
    OnlineAggregationCosts {
        merged_mults: ell as u64,
        merge_adds: (ell * (groups - 1)) as u64,
        merged_comparisons: 1,
        baseline_mults: (ell * groups) as u64,
        baseline_comparisons: groups as u64,
    }
}

/// Stream-pool sizing: `min(floor(SMs/4), floor(0.2 F / (40 C)), 32)`,
/// clamped to at least 2. The memory term is computed exactly as
/// `floor(F / (200 C))`.
pub fn stream_pool_size(sms: u64, free_bytes: u64, ct_bytes: u64) -> u64 {
    let sm_term = sms / 4;
    let mem_term = free_bytes / (200 * ct_bytes);
    sm_term.min(mem_term).clamp(2, 32)
}

/// One reconciled counter.
#[derive(Debug, Clone, Serialize)]
pub struct ReconcileRow {
    pub counter: &'static str,
    pub predicted: u64,
    pub measured: u64,
    pub matches: bool,
}

/// Per-counter comparison of a prediction against a measured ledger delta.
#[derive(Debug, Clone, Serialize)]
pub struct ReconcileReport {
    pub scenario: ScenarioDesc,
    pub rows: Vec<ReconcileRow>,
}

impl ReconcileReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.matches)
    }
}

/// A measured similarity run: the ledger delta it produced and the
/// scenario it ran under.
#[derive(Debug, Clone, Copy)]
pub struct MeasuredRun {
    pub scenario: ScenarioDesc,
    pub ledger: LedgerSnapshot,
}

/// Compare a prediction against a measured run counter by counter.
/// The scenarios must match exactly.
pub fn reconcile(prediction: &CostPrediction, measured: &MeasuredRun) -> Result<ReconcileReport> {
    if prediction.scenario != measured.scenario {
        return Err(Error::Config(format!(
            "prediction is for {:?} but the measurement is for {:?}",
            prediction.scenario, measured.scenario
        )));
    }
    let l = &measured.ledger;
    let rows = vec![
        row("rotations", prediction.rotations, l.rotations_total()),
        row("ct_ct_mults", prediction.ct_ct_mults, l.ct_ct_mults),
        row("ct_ct_adds", prediction.ct_ct_adds, l.ct_ct_adds),
        row("relinearizations", prediction.relins, l.relinearizations),
        row("rescales", prediction.rescales, l.rescales),
    ];
    Ok(ReconcileReport { scenario: prediction.scenario, rows })
}

fn row(counter: &'static str, predicted: u64, measured: u64) -> ReconcileRow {
    ReconcileRow { counter, predicted, measured, matches: predicted == measured }
}

/// Rotation-key census including a full slot-summing span, like the device
/// key tables.
pub fn key_census(engine: EngineKind, ell: usize, n1: usize, num_slots: usize) -> usize {
    key_set_for(engine, ell, n1, num_slots).len()
}

/// Negative giant-step keys needed for homomorphic pre-rotation at load.
pub fn negative_giant_offsets(ell: usize, n1: usize) -> BTreeSet<i64> {
    let params = BsgsParams { ell, n1 };
    params.giant_offsets().map(|o| -o).collect()
}
