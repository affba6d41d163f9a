//! Simulated leveled SIMD homomorphic backend.
//!
//! Slot arithmetic is exact (plain `f64` vectors), but every operation is
//! subject to the operational discipline of a leveled scheme: rotations
//! require registered keys, multiplications consume depth through explicit
//! rescaling, products carry degree 2 until relinearized, and every
//! operation is charged to a [`CostLedger`].

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};

/// Default rotation-key memory footprint: about 30 MB per key.
pub const DEFAULT_KEY_BYTES: u64 = 30 * (1 << 20);

/// Rotation-key footprint including device-side key-switching buffers,
/// about 37 MB per key.
pub const DEVICE_KEY_BYTES: u64 = 37 * (1 << 20);

/// Backend parameters: slot count and multiplicative depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    /// Number of SIMD slots per ciphertext. Must be a power of two.
    pub num_slots: usize,
    /// Multiplicative depth available before the level budget is exhausted.
    pub max_level: u32,
    /// Optional additive Gaussian noise injected after each ct-ct
    /// multiplication. Zero disables noise (the default).
    pub noise_std_dev: f64,
}

impl SimParams {
    pub fn new(num_slots: usize, max_level: u32) -> Result<Self> {
        let p = SimParams { num_slots, max_level, noise_std_dev: 0.0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_slots == 0 || !self.num_slots.is_power_of_two() {
            return Err(Error::Params(format!(
                "num_slots must be a power of two, got {}",
                self.num_slots
            )));
        }
        if self.max_level < 1 {
            return Err(Error::Params("max_level must be at least 1".into()));
        }
        if self.noise_std_dev < 0.0 {
            return Err(Error::Params("noise_std_dev must be non-negative".into()));
        }
        Ok(())
    }
}

/// Encoded plaintext: slot values padded to the full slot count.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainVector {
    slots: Vec<f64>,
}

impl PlainVector {
    pub fn slots(&self) -> &[f64] {
        &self.slots
    }

    pub fn into_slots(self) -> Vec<f64> {
        self.slots
    }
}

/// Gauge tracking how many degree-2 (unrelinearized) ciphertexts are alive.
#[derive(Debug, Default)]
pub struct Deg2Gauge {
    live: AtomicI64,
    peak: AtomicI64,
}

impl Deg2Gauge {
    fn inc(&self) {
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn dec(&self) {
        self.live.fetch_sub(1, Ordering::SeqCst);
    }

    pub fn live(&self) -> i64 {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> i64 {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.peak.store(self.live(), Ordering::SeqCst);
    }
}

/// RAII handle that keeps the degree-2 gauge in sync with ciphertext
/// lifetimes. Cloning a degree-2 ciphertext counts as another live object.
#[derive(Debug)]
struct Deg2Guard(Arc<Deg2Gauge>);

impl Clone for Deg2Guard {
    fn clone(&self) -> Self {
        self.0.inc();
        Deg2Guard(Arc::clone(&self.0))
    }
}

impl Drop for Deg2Guard {
    fn drop(&mut self) {
        self.0.dec();
    }
}

/// Simulated ciphertext: exact slot values plus level/degree/rescale
/// bookkeeping. Values are immutable once created; operations return new
/// ciphertexts.
#[derive(Debug, Clone)]
pub struct CipherVector {
    slots: Vec<f64>,
    level: u32,
    degree: u8,
    rescale_pending: bool,
    guard: Option<Deg2Guard>,
}

impl CipherVector {
    pub fn slots(&self) -> &[f64] {
        &self.slots
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn degree(&self) -> u8 {
        self.degree
    }

    pub fn rescale_pending(&self) -> bool {
        self.rescale_pending
    }
}

/// Set of permitted signed rotation offsets with a per-key memory model.
///
/// Offsets are stored canonically in `[-num_slots/2, num_slots/2)`; zero is
/// never stored since rotation by zero is the identity.
#[derive(Debug, Clone)]
pub struct RotationKeyRegistry {
    offsets: BTreeSet<i64>,
    num_slots: usize,
    bytes_per_key: u64,
}

impl RotationKeyRegistry {
    pub fn new(num_slots: usize) -> Self {
        RotationKeyRegistry {
            offsets: BTreeSet::new(),
            num_slots,
            bytes_per_key: DEFAULT_KEY_BYTES,
        }
    }

    pub fn with_bytes_per_key(mut self, bytes: u64) -> Self {
        self.bytes_per_key = bytes;
        self
    }

    /// Reduce an arbitrary signed offset to its canonical stored form.
    /// Returns `None` for offsets equivalent to zero.
    pub fn canonical(&self, offset: i64) -> Option<i64> {
        let n = self.num_slots as i64;
        let r = offset.rem_euclid(n);
        if r == 0 {
            None
        } else if r >= n / 2 {
            Some(r - n)
        } else {
            Some(r)
        }
    }

    /// Insert a single offset. Returns false when the offset reduces to the
    /// identity rotation.
    pub fn insert(&mut self, offset: i64) -> bool {
        match self.canonical(offset) {
            Some(c) => self.offsets.insert(c),
            None => false,
        }
    }

    pub fn remove(&mut self, offset: i64) -> bool {
        match self.canonical(offset) {
            Some(c) => self.offsets.remove(&c),
            None => false,
        }
    }

    pub fn contains(&self, offset: i64) -> bool {
        match self.canonical(offset) {
            Some(c) => self.offsets.contains(&c),
            // Rotation by zero needs no key.
            None => true,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offsets(&self) -> impl Iterator<Item = i64> + '_ {
        self.offsets.iter().copied()
    }

    pub fn bytes_per_key(&self) -> u64 {
        self.bytes_per_key
    }

    /// Total key memory: |offsets| x bytes_per_key.
    pub fn memory_bytes(&self) -> u64 {
        self.offsets.len() as u64 * self.bytes_per_key
    }
}

/// Counters for every charged backend operation. All counters are
/// monotonically non-decreasing; increments are atomic so parallel workers
/// can share one ledger.
#[derive(Debug, Default)]
pub struct CostLedger {
    rotations_plain: AtomicU64,
    rotations_hoisted: AtomicU64,
    hoist_decompositions: AtomicU64,
    hoist_accumulations: AtomicU64,
    ct_ct_mults: AtomicU64,
    pt_ct_mults: AtomicU64,
    ct_ct_adds: AtomicU64,
    pt_ct_adds: AtomicU64,
    rescales: AtomicU64,
    relinearizations: AtomicU64,
    keys_registered: AtomicU64,
    encryptions: AtomicU64,
}

macro_rules! bump {
    ($counter:expr) => {
        $counter.fetch_add(1, Ordering::Relaxed)
    };
}

impl CostLedger {
    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            rotations_plain: self.rotations_plain.load(Ordering::SeqCst),
            rotations_hoisted: self.rotations_hoisted.load(Ordering::SeqCst),
            hoist_decompositions: self.hoist_decompositions.load(Ordering::SeqCst),
            hoist_accumulations: self.hoist_accumulations.load(Ordering::SeqCst),
            ct_ct_mults: self.ct_ct_mults.load(Ordering::SeqCst),
            pt_ct_mults: self.pt_ct_mults.load(Ordering::SeqCst),
            ct_ct_adds: self.ct_ct_adds.load(Ordering::SeqCst),
            pt_ct_adds: self.pt_ct_adds.load(Ordering::SeqCst),
            rescales: self.rescales.load(Ordering::SeqCst),
            relinearizations: self.relinearizations.load(Ordering::SeqCst),
            keys_registered: self.keys_registered.load(Ordering::SeqCst),
            encryptions: self.encryptions.load(Ordering::SeqCst),
        }
    }
}

/// Point-in-time copy of the ledger counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LedgerSnapshot {
    pub rotations_plain: u64,
    pub rotations_hoisted: u64,
    pub hoist_decompositions: u64,
    pub hoist_accumulations: u64,
    pub ct_ct_mults: u64,
    pub pt_ct_mults: u64,
    pub ct_ct_adds: u64,
    pub pt_ct_adds: u64,
    pub rescales: u64,
    pub relinearizations: u64,
    pub keys_registered: u64,
    pub encryptions: u64,
}

impl LedgerSnapshot {
    /// Counter-wise difference `self - earlier`; counters never decrease.
    pub fn since(&self, earlier: &LedgerSnapshot) -> LedgerSnapshot {
        LedgerSnapshot {
            rotations_plain: self.rotations_plain - earlier.rotations_plain,
            rotations_hoisted: self.rotations_hoisted - earlier.rotations_hoisted,
            hoist_decompositions: self.hoist_decompositions - earlier.hoist_decompositions,
            hoist_accumulations: self.hoist_accumulations - earlier.hoist_accumulations,
            ct_ct_mults: self.ct_ct_mults - earlier.ct_ct_mults,
            pt_ct_mults: self.pt_ct_mults - earlier.pt_ct_mults,
            ct_ct_adds: self.ct_ct_adds - earlier.ct_ct_adds,
            pt_ct_adds: self.pt_ct_adds - earlier.pt_ct_adds,
            rescales: self.rescales - earlier.rescales,
            relinearizations: self.relinearizations - earlier.relinearizations,
            keys_registered: self.keys_registered - earlier.keys_registered,
            encryptions: self.encryptions - earlier.encryptions,
        }
    }

    /// Total nontrivial rotations, hoisted or not.
    pub fn rotations_total(&self) -> u64 {
        self.rotations_plain + self.rotations_hoisted
    }
}

/// Hoisting handle: the shared, ciphertext-dependent decomposition of one
/// ciphertext, reused across many rotations. Creating the handle charges
/// one decomposition (C1); each hoisted rotation charges one accumulation
/// (C2).
#[derive(Debug, Clone)]
pub struct HoistHandle {
    source: CipherVector,
}

impl HoistHandle {
    pub fn source(&self) -> &CipherVector {
        &self.source
    }
}

/// Backend context: parameters, the shared cost ledger, the degree-2
/// liveness gauge, and the optional noise source.
#[derive(Debug)]
pub struct HeContext {
    params: SimParams,
    ledger: CostLedger,
    deg2: Arc<Deg2Gauge>,
    noise: Option<Mutex<ChaCha12Rng>>,
}

impl HeContext {
    pub fn new(params: SimParams) -> Result<Self> {
        params.validate()?;
        let noise = if params.noise_std_dev > 0.0 {
            Some(Mutex::new(ChaCha12Rng::seed_from_u64(0)))
        } else {
            None
        };
        Ok(HeContext { params, ledger: CostLedger::default(), deg2: Arc::new(Deg2Gauge::default()), noise })
    }

    pub fn with_noise_seed(params: SimParams, seed: u64) -> Result<Self> {
        let mut ctx = Self::new(params)?;
        if params.noise_std_dev > 0.0 {
            ctx.noise = Some(Mutex::new(ChaCha12Rng::seed_from_u64(seed)));
        }
        Ok(ctx)
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn num_slots(&self) -> usize {
        self.params.num_slots
    }

    pub fn max_level(&self) -> u32 {
        self.params.max_level
    }

    pub fn ledger(&self) -> LedgerSnapshot {
        self.ledger.snapshot()
    }

    pub fn deg2_gauge(&self) -> &Deg2Gauge {
        &self.deg2
    }

    /// Register a batch of rotation offsets, charging one key per distinct
    /// canonical offset actually added.
    pub fn register_keys<I: IntoIterator<Item = i64>>(&self, registry: &mut RotationKeyRegistry, offsets: I) {
        for off in offsets {
            if registry.insert(off) {
                bump!(self.ledger.keys_registered);
            }
        }
    }

    /// Pack raw values into a plaintext, zero-padding up to the slot count.
    pub fn encode(&self, values: &[f64]) -> Result<PlainVector> {
        if values.len() > self.params.num_slots {
            return Err(Error::Capacity { len: values.len(), num_slots: self.params.num_slots });
        }
        let mut slots = vec![0.0; self.params.num_slots];
        slots[..values.len()].copy_from_slice(values);
        Ok(PlainVector { slots })
    }

    /// Fresh ciphertext at the top level.
    pub fn encrypt(&self, pt: &PlainVector) -> CipherVector {
        bump!(self.ledger.encryptions);
        CipherVector {
            slots: pt.slots.clone(),
            level: self.params.max_level,
            degree: 1,
            rescale_pending: false,
            guard: None,
        }
    }

    pub fn decrypt(&self, ct: &CipherVector) -> Result<PlainVector> {
        if ct.degree != 1 {
            return Err(Error::NeedsRelinearize);
        }
        Ok(PlainVector { slots: ct.slots.clone() })
    }

    /// Ciphertext-ciphertext addition. Operands must share level and degree;
    /// degree-2 sums of unrelinearized products are allowed.
    pub fn add(&self, a: &CipherVector, b: &CipherVector) -> Result<CipherVector> {
        if a.level != b.level {
            return Err(Error::LevelMismatch { a: a.level, b: b.level });
        }
        if a.degree != b.degree {
            return Err(Error::DegreeMismatch);
        }
        bump!(self.ledger.ct_ct_adds);
        let slots = a.slots.iter().zip(&b.slots).map(|(x, y)| x + y).collect();
        Ok(CipherVector {
            slots,
            level: a.level,
            degree: a.degree,
            rescale_pending: a.rescale_pending || b.rescale_pending,
            guard: if a.degree == 2 { Some(self.deg2_guard()) } else { None },
        })
    }

    /// In-place ciphertext addition with the same preconditions as [`add`],
    /// but without materializing a new ciphertext.
    ///
    /// [`add`]: HeContext::add
    pub fn add_assign(&self, acc: &mut CipherVector, b: &CipherVector) -> Result<()> {
        if acc.level != b.level {
            return Err(Error::LevelMismatch { a: acc.level, b: b.level });
        }
        if acc.degree != b.degree {
            return Err(Error::DegreeMismatch);
        }
        bump!(self.ledger.ct_ct_adds);
        for (x, y) in acc.slots.iter_mut().zip(&b.slots) {
            *x += y;
        }
        acc.rescale_pending |= b.rescale_pending;
        Ok(())
    }

    /// Plaintext-ciphertext addition.
    pub fn add_plain(&self, ct: &CipherVector, pt: &PlainVector) -> Result<CipherVector> {
        bump!(self.ledger.pt_ct_adds);
        let slots = ct.slots.iter().zip(&pt.slots).map(|(x, y)| x + y).collect();
        Ok(CipherVector { slots, ..self.reborrow(ct) })
    }

    /// Add a scalar constant to every slot. Constant folding does not touch
    /// the level budget.
    pub fn add_scalar(&self, ct: &CipherVector, s: f64) -> CipherVector {
        bump!(self.ledger.pt_ct_adds);
        let slots = ct.slots.iter().map(|x| x + s).collect();
        CipherVector { slots, ..self.reborrow(ct) }
    }

    /// Multiply every slot by a scalar constant. Like `add_scalar`, this is
    /// absorbed into the scale and does not consume a level.
    pub fn mult_scalar(&self, ct: &CipherVector, s: f64) -> CipherVector {
        bump!(self.ledger.pt_ct_mults);
        let slots = ct.slots.iter().map(|x| x * s).collect();
        CipherVector { slots, ..self.reborrow(ct) }
    }

    /// Ciphertext-ciphertext multiplication without relinearization. The
    /// result has degree 2 and a pending rescale; the level is consumed only
    /// by the subsequent rescale.
    pub fn mult_no_relin(&self, a: &CipherVector, b: &CipherVector) -> Result<CipherVector> {
        self.check_mult_operand(a)?;
        self.check_mult_operand(b)?;
        if a.level != b.level {
            return Err(Error::LevelMismatch { a: a.level, b: b.level });
        }
        bump!(self.ledger.ct_ct_mults);
        let mut slots: Vec<f64> = a.slots.iter().zip(&b.slots).map(|(x, y)| x * y).collect();
        self.inject_noise(&mut slots);
        Ok(CipherVector {
            slots,
            level: a.level,
            degree: 2,
            rescale_pending: true,
            guard: Some(self.deg2_guard()),
        })
    }

    /// Fused multiply-accumulate: `acc += a (*) b` without materializing the
    /// intermediate product, so a running accumulator is the only live
    /// degree-2 object per worker. Charges one multiplication and one
    /// addition.
    pub fn mul_acc(&self, acc: &mut CipherVector, a: &CipherVector, b: &CipherVector) -> Result<()> {
        self.check_mult_operand(a)?;
        self.check_mult_operand(b)?;
        if a.level != b.level {
            return Err(Error::LevelMismatch { a: a.level, b: b.level });
        }
        if acc.level != a.level {
            return Err(Error::LevelMismatch { a: acc.level, b: a.level });
        }
        if acc.degree != 2 {
            return Err(Error::DegreeMismatch);
        }
        bump!(self.ledger.ct_ct_mults);
        bump!(self.ledger.ct_ct_adds);
        if let Some(noise) = &self.noise {
            let normal = Normal::new(0.0, self.params.noise_std_dev).expect("validated std dev");
            let mut rng = noise.lock().expect("noise rng poisoned");
            for ((x, a), b) in acc.slots.iter_mut().zip(&a.slots).zip(&b.slots) {
                *x += a * b + normal.sample(&mut *rng);
            }
        } else {
            for ((x, a), b) in acc.slots.iter_mut().zip(&a.slots).zip(&b.slots) {
                *x += a * b;
            }
        }
        acc.rescale_pending = true;
        Ok(())
    }

    /// Plaintext-ciphertext multiplication. Result stays degree 1 but
    /// acquires a pending rescale.
    pub fn mult_plain(&self, ct: &CipherVector, pt: &PlainVector) -> Result<CipherVector> {
        self.check_mult_operand(ct)?;
        bump!(self.ledger.pt_ct_mults);
        let slots = ct.slots.iter().zip(&pt.slots).map(|(x, y)| x * y).collect();
        Ok(CipherVector {
            slots,
            level: ct.level,
            degree: ct.degree,
            rescale_pending: true,
            guard: ct.guard.clone(),
        })
    }

    /// Reduce a degree-2 ciphertext back to degree 1. A no-op on degree-1
    /// inputs (and not charged).
    pub fn relinearize(&self, ct: &CipherVector) -> CipherVector {
        if ct.degree != 2 {
            return ct.clone();
        }
        bump!(self.ledger.relinearizations);
        CipherVector {
            slots: ct.slots.clone(),
            level: ct.level,
            degree: 1,
            rescale_pending: ct.rescale_pending,
            guard: None,
        }
    }

    /// Consume one level to clear the pending rescale. Slots are unchanged
    /// in the exact simulation.
    pub fn rescale(&self, ct: &CipherVector) -> Result<CipherVector> {
        if !ct.rescale_pending {
            return Err(Error::NothingToRescale);
        }
        if ct.level == 0 {
            return Err(Error::DepthExhausted);
        }
        bump!(self.ledger.rescales);
        Ok(CipherVector {
            slots: ct.slots.clone(),
            level: ct.level - 1,
            degree: ct.degree,
            rescale_pending: false,
            guard: ct.guard.clone(),
        })
    }

    /// Lower the higher-level operand to the other's level so they can be
    /// combined. Free of ledger charges, like a modulus drop.
    pub fn match_level(&self, a: &CipherVector, b: &CipherVector) -> Result<(CipherVector, CipherVector)> {
        if a.rescale_pending || b.rescale_pending {
            return Err(Error::PendingRescale);
        }
        let target = a.level.min(b.level);
        Ok((self.drop_to_level(a, target), self.drop_to_level(b, target)))
    }

    fn drop_to_level(&self, ct: &CipherVector, level: u32) -> CipherVector {
        debug_assert!(level <= ct.level);
        CipherVector {
            slots: ct.slots.clone(),
            level,
            degree: ct.degree,
            rescale_pending: ct.rescale_pending,
            guard: ct.guard.clone(),
        }
    }

    /// Cyclic rotation. Positive `r` shifts left: `out[t] = in[(t+r) mod n]`.
    /// Requires the canonical offset to be registered; rotating by zero is
    /// free and needs no key.
    pub fn rotate(&self, ct: &CipherVector, r: i64, keys: &RotationKeyRegistry) -> Result<CipherVector> {
        if ct.degree != 1 {
            return Err(Error::NeedsRelinearize);
        }
        let n = self.params.num_slots as i64;
        let shift = r.rem_euclid(n) as usize;
        if shift == 0 {
            return Ok(ct.clone());
        }
        let canonical = keys.canonical(r).expect("nonzero by the shift check");
        if !keys.contains(r) {
            return Err(Error::MissingRotationKey { offset: canonical });
        }
        bump!(self.ledger.rotations_plain);
        Ok(CipherVector { slots: rotate_slots(&ct.slots, shift), ..self.reborrow(ct) })
    }

    /// Share the decomposition of a ciphertext for repeated rotation.
    pub fn hoist_precompute(&self, ct: &CipherVector) -> Result<HoistHandle> {
        if ct.degree != 1 {
            return Err(Error::NeedsRelinearize);
        }
        bump!(self.ledger.hoist_decompositions);
        Ok(HoistHandle { source: ct.clone() })
    }

    /// Rotate via a hoisting handle: same semantics as [`rotate`], charged
    /// as one accumulation instead of a full key switch.
    ///
    /// [`rotate`]: HeContext::rotate
    pub fn hoisted_rotate(&self, handle: &HoistHandle, r: i64, keys: &RotationKeyRegistry) -> Result<CipherVector> {
        let ct = &handle.source;
        let n = self.params.num_slots as i64;
        let shift = r.rem_euclid(n) as usize;
        if shift == 0 {
            return Ok(ct.clone());
        }
        let canonical = keys.canonical(r).expect("nonzero by the shift check");
        if !keys.contains(r) {
            return Err(Error::MissingRotationKey { offset: canonical });
        }
        bump!(self.ledger.rotations_hoisted);
        bump!(self.ledger.hoist_accumulations);
        Ok(CipherVector { slots: rotate_slots(&ct.slots, shift), ..self.reborrow(ct) })
    }

    /// Rotate-and-add tree summing each `span`-aligned block into its first
    /// slot; slot 0 ends up holding the sum of the first `span` slots.
    /// Charges `log2(span)` plain rotations and as many additions, and
    /// requires the power-of-two offsets `{1, 2, ..., span/2}`.
    pub fn eval_sum(&self, ct: &CipherVector, span: usize, keys: &RotationKeyRegistry) -> Result<CipherVector> {
        if span == 0 || !span.is_power_of_two() || span > self.params.num_slots {
            return Err(Error::BadSpan { span });
        }
        let mut acc = ct.clone();
        let mut step = 1usize;
        while step < span {
            let rotated = self.rotate(&acc, step as i64, keys)?;
            acc = self.add(&acc, &rotated)?;
            step *= 2;
        }
        Ok(acc)
    }

    /// Rebuild a degree-1 ciphertext from stored slot values, e.g. when
    /// deserializing a database. Not charged as an encryption.
    pub(crate) fn cipher_from_slots(&self, slots: Vec<f64>, level: u32) -> CipherVector {
        debug_assert_eq!(slots.len(), self.params.num_slots);
        CipherVector { slots, level, degree: 1, rescale_pending: false, guard: None }
    }

    fn deg2_guard(&self) -> Deg2Guard {
        self.deg2.inc();
        Deg2Guard(Arc::clone(&self.deg2))
    }

    fn check_mult_operand(&self, ct: &CipherVector) -> Result<()> {
        if ct.degree != 1 {
            return Err(Error::DegreeMismatch);
        }
        if ct.rescale_pending {
            return Err(Error::PendingRescale);
        }
        if ct.level == 0 {
            return Err(Error::DepthExhausted);
        }
        Ok(())
    }

    fn inject_noise(&self, slots: &mut [f64]) {
        if let Some(noise) = &self.noise {
            let normal = Normal::new(0.0, self.params.noise_std_dev).expect("validated std dev");
            let mut rng = noise.lock().expect("noise rng poisoned");
            for s in slots.iter_mut() {
                *s += normal.sample(&mut *rng);
            }
        }
    }

    /// Copy bookkeeping from an existing ciphertext for slot-preserving ops.
    fn reborrow(&self, ct: &CipherVector) -> CipherVector {
        CipherVector {
            slots: Vec::new(),
            level: ct.level,
            degree: ct.degree,
            rescale_pending: ct.rescale_pending,
            guard: ct.guard.clone(),
        }
    }
}

/// Left cyclic shift of a slot vector.
pub(crate) fn rotate_slots(slots: &[f64], shift: usize) -> Vec<f64> {
    let n = slots.len();
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&slots[shift..]);
    out.extend_from_slice(&slots[..shift]);
    debug_assert_eq!(out.len(), n);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(num_slots: usize, max_level: u32) -> HeContext {
        HeContext::new(SimParams::new(num_slots, max_level).unwrap()).unwrap()
    }

    fn keys_with(ctx: &HeContext, offsets: &[i64]) -> RotationKeyRegistry {
        let mut reg = RotationKeyRegistry::new(ctx.num_slots());
        ctx.register_keys(&mut reg, offsets.iter().copied());
        reg
    }

    #[test]
    fn encode_pads_with_zeros() {
        let c = ctx(4, 2);
        assert_eq!(c.encode(&[1.0, 2.0]).unwrap().slots(), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(c.encode(&[]).unwrap().slots(), &[0.0; 4]);
        assert_eq!(c.encode(&[0.5; 4]).unwrap().slots(), &[0.5; 4]);
        assert!(matches!(c.encode(&[0.0; 5]), Err(Error::Capacity { len: 5, .. })));
    }

    #[test]
    fn encrypt_records_max_level() {
        let c = ctx(4, 11);
        let ct = c.encrypt(&c.encode(&[1.0, 2.0]).unwrap());
        assert_eq!(ct.level(), 11);
        assert_eq!(ct.degree(), 1);
        assert_eq!(c.decrypt(&ct).unwrap().slots(), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(c.ledger().encryptions, 1);
    }

    #[test]
    fn decrypt_rejects_degree_two() {
        let c = ctx(4, 3);
        let a = c.encrypt(&c.encode(&[2.0, 3.0]).unwrap());
        let b = c.encrypt(&c.encode(&[4.0, 5.0]).unwrap());
        let prod = c.mult_no_relin(&a, &b).unwrap();
        assert!(matches!(c.decrypt(&prod), Err(Error::NeedsRelinearize)));
        let lin = c.relinearize(&prod);
        assert_eq!(c.decrypt(&lin).unwrap().slots()[..2], [8.0, 15.0]);
    }

    #[test]
    fn add_examples() {
        let c = ctx(4, 2);
        let a = c.encrypt(&c.encode(&[1.0, 2.0]).unwrap());
        let b = c.encrypt(&c.encode(&[3.0, 4.0]).unwrap());
        let sum = c.add(&a, &b).unwrap();
        assert_eq!(sum.slots()[..2], [4.0, 6.0]);
        let zero = c.encrypt(&c.encode(&[]).unwrap());
        assert_eq!(c.add(&a, &zero).unwrap().slots(), a.slots());
    }

    #[test]
    fn degree_two_sums_allowed() {
        let c = ctx(4, 3);
        let a = c.encrypt(&c.encode(&[1.0, 2.0]).unwrap());
        let b = c.encrypt(&c.encode(&[3.0, 4.0]).unwrap());
        let p1 = c.mult_no_relin(&a, &b).unwrap();
        let p2 = c.mult_no_relin(&b, &a).unwrap();
        let sum = c.add(&p1, &p2).unwrap();
        assert_eq!(sum.degree(), 2);
        assert_eq!(sum.slots()[..2], [6.0, 16.0]);
    }

    #[test]
    fn mult_examples_and_depth_boundary() {
        let c = ctx(2, 1);
        let a = c.encrypt(&c.encode(&[2.0, 3.0]).unwrap());
        let b = c.encrypt(&c.encode(&[4.0, 5.0]).unwrap());
        let prod = c.mult_no_relin(&a, &b).unwrap();
        assert_eq!(prod.slots(), &[8.0, 15.0]);
        assert_eq!(prod.degree(), 2);
        assert!(prod.rescale_pending());
        assert_eq!(prod.level(), 1);

        let ones = c.encode(&[1.0, 1.0]).unwrap();
        let same = c.mult_plain(&a, &ones).unwrap();
        assert_eq!(same.slots(), a.slots());
        assert_eq!(same.degree(), 1);

        // Consume the single level, then further multiplication must fail.
        let lin = c.relinearize(&prod);
        let low = c.rescale(&lin).unwrap();
        assert_eq!(low.level(), 0);
        assert!(matches!(c.mult_no_relin(&low, &low), Err(Error::DepthExhausted)));
    }

    #[test]
    fn mult_rejects_pending_operand() {
        let c = ctx(2, 3);
        let a = c.encrypt(&c.encode(&[2.0]).unwrap());
        let pending = c.mult_plain(&a, &c.encode(&[1.0, 1.0]).unwrap()).unwrap();
        assert!(matches!(c.mult_no_relin(&pending, &a), Err(Error::PendingRescale)));
    }

    #[test]
    fn relinearize_noop_not_charged() {
        let c = ctx(2, 2);
        let a = c.encrypt(&c.encode(&[1.0]).unwrap());
        let before = c.ledger();
        let same = c.relinearize(&a);
        assert_eq!(same.degree(), 1);
        assert_eq!(c.ledger().relinearizations, before.relinearizations);
    }

    #[test]
    fn single_relinearization_after_many_products() {
        let c = ctx(2, 2);
        let a = c.encrypt(&c.encode(&[1.0, 1.0]).unwrap());
        let mut acc = c.mult_no_relin(&a, &a).unwrap();
        for _ in 0..511 {
            c.mul_acc(&mut acc, &a, &a).unwrap();
        }
        let lin = c.relinearize(&acc);
        assert_eq!(lin.slots(), &[512.0, 512.0]);
        assert_eq!(c.ledger().relinearizations, 1);
        assert_eq!(c.ledger().ct_ct_mults, 512);
    }

    #[test]
    fn rescale_chain_reaches_level_zero() {
        let c = ctx(2, 11);
        let ones = c.encode(&[1.0, 1.0]).unwrap();
        let mut ct = c.encrypt(&ones);
        for expected in (0..11).rev() {
            let p = c.mult_plain(&ct, &ones).unwrap();
            ct = c.rescale(&p).unwrap();
            assert_eq!(ct.level(), expected);
        }
        assert!(matches!(c.rescale(&ct), Err(Error::NothingToRescale)));
    }

    #[test]
    fn match_level_drops_to_lower() {
        let c = ctx(2, 8);
        let ones = c.encode(&[1.0, 1.0]).unwrap();
        let a = c.encrypt(&ones); // level 8
        let mut b = c.encrypt(&ones);
        b = c.rescale(&c.mult_plain(&b, &ones).unwrap()).unwrap(); // level 7
        b = c.rescale(&c.mult_plain(&b, &ones).unwrap()).unwrap(); // level 6... 5 after next
        b = c.rescale(&c.mult_plain(&b, &ones).unwrap()).unwrap(); // level 5
        let (a2, b2) = c.match_level(&a, &b).unwrap();
        assert_eq!((a2.level(), b2.level()), (5, 5));
        let (x, y) = c.match_level(&a2, &b2).unwrap();
        assert_eq!((x.level(), y.level()), (5, 5));
    }

    #[test]
    fn rotate_semantics_and_enforcement() {
        let c = ctx(4, 2);
        let ct = c.encrypt(&c.encode(&[1.0, 2.0, 3.0, 4.0]).unwrap());
        let keys = keys_with(&c, &[1, 2]);
        assert_eq!(c.rotate(&ct, 1, &keys).unwrap().slots(), &[2.0, 3.0, 4.0, 1.0]);

        let before = c.ledger();
        let same = c.rotate(&ct, 0, &keys).unwrap();
        assert_eq!(same.slots(), ct.slots());
        assert_eq!(c.ledger().rotations_plain, before.rotations_plain);

        match c.rotate(&ct, 3, &keys) {
            Err(Error::MissingRotationKey { offset }) => assert_eq!(offset, -1), // 3 mod 4 canonicalizes to -1
            other => panic!("expected missing key, got {other:?}"),
        }

        // Unrelinearized products can be neither rotated nor hoisted.
        let prod = c.mult_no_relin(&ct, &ct).unwrap();
        assert!(matches!(c.rotate(&prod, 1, &keys), Err(Error::NeedsRelinearize)));
        assert!(matches!(c.hoist_precompute(&prod), Err(Error::NeedsRelinearize)));
    }

    #[test]
    fn negative_rotation_is_right_shift() {
        let c = ctx(4, 2);
        let ct = c.encrypt(&c.encode(&[1.0, 2.0, 3.0, 4.0]).unwrap());
        let keys = keys_with(&c, &[-1]);
        assert_eq!(c.rotate(&ct, -1, &keys).unwrap().slots(), &[4.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn key_registration_after_failure_allows_rotation() {
        let c = ctx(8, 2);
        let ct = c.encrypt(&c.encode(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let mut keys = keys_with(&c, &[]);
        assert!(c.rotate(&ct, 3, &keys).is_err());
        c.register_keys(&mut keys, [3]);
        assert_eq!(c.ledger().keys_registered, 1);
        let r = c.rotate(&ct, 3, &keys).unwrap();
        assert_eq!(r.slots(), &[4.0, 5.0, 6.0, 7.0, 8.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn hoisting_charges_one_decomposition() {
        let c = ctx(64, 2);
        let ct = c.encrypt(&c.encode(&[1.0; 64]).unwrap());
        let keys = keys_with(&c, &(1..=22).collect::<Vec<i64>>());
        let handle = c.hoist_precompute(&ct).unwrap();
        for r in 1..=22 {
            c.hoisted_rotate(&handle, r, &keys).unwrap();
        }
        let l = c.ledger();
        assert_eq!(l.hoist_decompositions, 1);
        assert_eq!(l.hoist_accumulations, 22);
        assert_eq!(l.rotations_hoisted, 22);
        assert_eq!(l.rotations_plain, 0);

        // A second handle on the same ciphertext is a second decomposition.
        let _again = c.hoist_precompute(&ct).unwrap();
        assert_eq!(c.ledger().hoist_decompositions, 2);
    }

    #[test]
    fn hoisted_rotate_matches_plain_rotate() {
        let c = ctx(8, 2);
        let ct = c.encrypt(&c.encode(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let keys = keys_with(&c, &[3]);
        let handle = c.hoist_precompute(&ct).unwrap();
        assert_eq!(
            c.hoisted_rotate(&handle, 3, &keys).unwrap().slots(),
            c.rotate(&ct, 3, &keys).unwrap().slots()
        );
        let before = c.ledger();
        let same = c.hoisted_rotate(&handle, 0, &keys).unwrap();
        assert_eq!(same.slots(), ct.slots());
        assert_eq!(c.ledger().rotations_hoisted, before.rotations_hoisted);
    }

    #[test]
    fn eval_sum_examples() {
        let c = ctx(4, 2);
        let ct = c.encrypt(&c.encode(&[1.0, 1.0, 1.0, 1.0]).unwrap());
        let keys = keys_with(&c, &[1, 2]);
        let summed = c.eval_sum(&ct, 4, &keys).unwrap();
        assert_eq!(summed.slots()[0], 4.0);

        let before = c.ledger();
        let same = c.eval_sum(&ct, 1, &keys).unwrap();
        assert_eq!(same.slots(), ct.slots());
        assert_eq!(c.ledger().rotations_plain, before.rotations_plain);

        let c8 = ctx(8, 2);
        let ct8 = c8.encrypt(&c8.encode(&[1.0; 8]).unwrap());
        let bare = keys_with(&c8, &[1]);
        assert!(matches!(c8.eval_sum(&ct8, 4, &bare), Err(Error::MissingRotationKey { offset: 2 })));
    }

    #[test]
    fn eval_sum_block_aligned() {
        let c = ctx(8, 2);
        let ct = c.encrypt(&c.encode(&[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]).unwrap());
        let keys = keys_with(&c, &[1, 2]);
        let summed = c.eval_sum(&ct, 4, &keys).unwrap();
        assert_eq!(summed.slots()[0], 10.0);
        assert_eq!(summed.slots()[4], 100.0);
    }

    #[test]
    fn ledger_rotation_hoist_identity() {
        let c = ctx(16, 2);
        let ct = c.encrypt(&c.encode(&[1.0; 16]).unwrap());
        let keys = keys_with(&c, &(1..8).collect::<Vec<i64>>());
        let handle = c.hoist_precompute(&ct).unwrap();
        for r in 1..8 {
            c.hoisted_rotate(&handle, r, &keys).unwrap();
            c.rotate(&ct, r, &keys).unwrap();
        }
        let l = c.ledger();
        assert_eq!(l.rotations_hoisted, l.hoist_accumulations);
    }

    #[test]
    fn deg2_gauge_tracks_liveness() {
        let c = ctx(2, 4);
        let a = c.encrypt(&c.encode(&[1.0]).unwrap());
        assert_eq!(c.deg2_gauge().live(), 0);
        let p = c.mult_no_relin(&a, &a).unwrap();
        assert_eq!(c.deg2_gauge().live(), 1);
        let q = p.clone();
        assert_eq!(c.deg2_gauge().live(), 2);
        drop(p);
        assert_eq!(c.deg2_gauge().live(), 1);
        let lin = c.relinearize(&q);
        drop(q);
        drop(lin);
        assert_eq!(c.deg2_gauge().live(), 0);
        assert_eq!(c.deg2_gauge().peak(), 2);
    }

    #[test]
    fn noise_injection_perturbs_products_only() {
        let params = SimParams { num_slots: 4, max_level: 3, noise_std_dev: 0.01 };
        let c = HeContext::with_noise_seed(params, 7).unwrap();
        let a = c.encrypt(&c.encode(&[1.0, 1.0, 1.0, 1.0]).unwrap());
        let sum = c.add(&a, &a).unwrap();
        assert_eq!(sum.slots(), &[2.0; 4]);
        let prod = c.mult_no_relin(&a, &a).unwrap();
        assert!(prod.slots().iter().any(|&s| s != 1.0));
        assert!(prod.slots().iter().all(|&s| (s - 1.0).abs() < 0.1));
    }
}
