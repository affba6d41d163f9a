//! Shared fixtures for the engine benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use hesearch_core::backend::{HeContext, RotationKeyRegistry, SimParams};
use hesearch_core::costs::key_set_for;
use hesearch_core::eval::EngineKind;
use hesearch_core::packing::{enroll, normalize_l2, LayoutParams, PackedDatabase};

pub struct Fixture {
    pub ctx: HeContext,
    pub db: PackedDatabase,
    pub query: Vec<f64>,
    pub keys: RotationKeyRegistry,
    pub n1: usize,
}

/// A seeded random database enrolled under the engine's layout, with the
/// full key set the engine needs.
pub fn fixture(engine: EngineKind, ell: usize, num_slots: usize, k: usize, n1: usize) -> Fixture {
    let mut rng = ChaCha12Rng::seed_from_u64(0xBE7C);
    let rows: Vec<Vec<f64>> =
        (0..k).map(|_| (0..ell).map(|_| rng.gen_range(-99.0..99.0)).collect()).collect();
    let query: Vec<f64> = (0..ell).map(|_| rng.gen_range(-99.0..99.0)).collect();
    let ctx = HeContext::new(SimParams::new(num_slots, 16).unwrap()).unwrap();
    let params = LayoutParams::new(ell, num_slots, n1, engine.layout()).unwrap();
    let db = enroll(&ctx, &rows, &params).unwrap();
    let mut keys = RotationKeyRegistry::new(num_slots);
    ctx.register_keys(&mut keys, key_set_for(engine, ell, n1, num_slots));
    Fixture { ctx, db, query: normalize_l2(&query).unwrap(), keys, n1 }
}
