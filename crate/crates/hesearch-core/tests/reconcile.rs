//! Measured ledgers equal the closed-form predictions for every engine
//! across a parameter grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use hesearch_core::backend::{HeContext, RotationKeyRegistry, SimParams};
use hesearch_core::costs::{key_set_for, predict_costs, reconcile, MeasuredRun, ScenarioDesc};
use hesearch_core::eval::{self, BsgsParams, EngineKind, HoistMode};
use hesearch_core::packing::{enroll, normalize_l2, LayoutParams};

fn rows(rng: &mut ChaCha12Rng, k: usize, ell: usize) -> Vec<Vec<f64>> {
    (0..k).map(|_| (0..ell).map(|_| rng.gen_range(-99.0..99.0)).collect()).collect()
}

fn measure(
    engine: EngineKind,
    ell: usize,
    n1: usize,
    groups: usize,
    num_slots: usize,
    rng: &mut ChaCha12Rng,
) -> MeasuredRun {
    let he = HeContext::new(SimParams::new(num_slots, 6).unwrap()).unwrap();
    let k = match engine {
        EngineKind::SenderBlockPacked => groups * (num_slots / ell / 2) * ell,
        _ => groups * num_slots,
    };
    let params = LayoutParams::new(ell, num_slots, n1, engine.layout()).unwrap();
    let db = enroll(&he, &rows(rng, k, ell), &params).unwrap();
    assert_eq!(db.group_count(), groups);
    let mut keys = RotationKeyRegistry::new(num_slots);
    he.register_keys(&mut keys, key_set_for(engine, ell, n1, 1));
    let q = normalize_l2(&rows(rng, 1, ell).pop().unwrap()).unwrap();
    let query = eval::encrypt_replicated_query(&he, &q).unwrap();

    let before = he.ledger();
    match engine {
        EngineKind::Hydia => {
            let bs = BsgsParams::new(ell, ell).unwrap();
            let table =
                eval::build_rotation_table(&he, &query, &bs, &keys, HoistMode::SingleHoist).unwrap();
            eval::hydia_similarity(&he, &db, &table).unwrap();
        }
        EngineKind::BsgsDiagonal => {
            let bs = BsgsParams::new(ell, n1).unwrap();
            let table =
                eval::build_rotation_table(&he, &query, &bs, &keys, HoistMode::DoubleHoist).unwrap();
            eval::bsgs_diagonal_similarity(&he, &db, &table, 2).unwrap();
        }
        EngineKind::GroupedBsgs => {
            let bs = BsgsParams::new(ell, n1).unwrap();
            eval::grouped_bsgs_similarity(&he, &db, &query, &bs, &keys).unwrap();
        }
        EngineKind::SenderBlockPacked => {
            let bs = BsgsParams::new(ell, n1).unwrap();
            eval::sender_bsgs_block_packed(&he, &db, &query, &bs, &keys, n1).unwrap();
        }
    }
    MeasuredRun {
        scenario: ScenarioDesc { engine: engine.name(), ell, n1, n2: ell.div_ceil(n1), groups },
        ledger: he.ledger().since(&before),
    }
}

#[test]
fn predictions_match_measured_ledgers_on_grid() {
    let mut rng = ChaCha12Rng::seed_from_u64(0xC0575);
    for engine in [
        EngineKind::Hydia,
        EngineKind::BsgsDiagonal,
        EngineKind::GroupedBsgs,
        EngineKind::SenderBlockPacked,
    ] {
        for ell in [4usize, 8, 16] {
            for n1 in [1usize, (ell as f64).sqrt() as usize, ell] {
                for groups in [1usize, 2, 4] {
                    let num_slots = ell * 4;
                    let measured = measure(engine, ell, n1, groups, num_slots, &mut rng);
                    let prediction = predict_costs(engine, ell, n1, groups);
                    let report = reconcile(&prediction, &measured).unwrap();
                    assert!(
                        report.pass(),
                        "{engine} ell={ell} n1={n1} G={groups}: {:#?}",
                        report.rows
                    );
                }
            }
        }
    }
}

/// The desk-scale check at ell = 512 capped via num_slots = 1024.
#[test]
fn predictions_match_at_ell_512_capped() {
    let mut rng = ChaCha12Rng::seed_from_u64(0xC0576);
    for (engine, groups) in [
        (EngineKind::BsgsDiagonal, 1usize),
        (EngineKind::GroupedBsgs, 1),
        (EngineKind::GroupedBsgs, 4),
    ] {
        let measured = measure(engine, 512, 23, groups, 1024, &mut rng);
        let prediction = predict_costs(engine, 512, 23, groups);
        let report = reconcile(&prediction, &measured).unwrap();
        assert!(report.pass(), "{engine} G={groups}: {:#?}", report.rows);
    }
}
