//! Encrypted similarity search over a simulated leveled SIMD backend.
//!
//! The crate provides:
//! - [`backend`]: exact slot arithmetic under leveled-scheme discipline
//!   (rotation keys, levels, rescaling, degree bookkeeping) with a cost
//!   ledger charging every operation;
//! - [`packing`]: diagonal extraction and the three database layouts
//!   (flat concatenation, replicated stride-2N block packing, pre-rotated
//!   flat), plus the on-disk format;
//! - [`eval`]: the similarity engines producing per-group score
//!   ciphertexts;
//! - [`compare`]: Chebyshev sign comparison with Paterson-Stockmeyer
//!   evaluation;
//! - [`scenarios`]: membership, identification, aggregated-query and
//!   online-aggregation protocols over synthetic datasets;
//! - [`costs`]: closed-form operation/key-count predictions and
//!   ledger reconciliation.

pub mod backend;
pub mod compare;
pub mod costs;
pub mod error;
pub mod eval;
pub mod packing;
pub mod scenarios;
pub mod util;

pub use backend::{
    CipherVector, CostLedger, HeContext, HoistHandle, LedgerSnapshot, PlainVector,
    RotationKeyRegistry, SimParams, DEFAULT_KEY_BYTES, DEVICE_KEY_BYTES,
};
pub use error::{Error, Result};
pub use eval::EngineKind;
