//! Desk-scale test-time adaptation laboratory.
//!
//! The crate trains a small source classifier on a synthetic labeled image
//! set, then adapts it online against corrupted streams of the same classes.
//! Two mechanisms drive the adaptation:
//!
//! * a per-layer weight-regularization penalty derived from how stable each
//!   parametric unit's gradients are under input transformations, which damps
//!   updates on shift-agnostic layers, and
//! * an auxiliary prototype classifier in a projection space, whose
//!   entropy-based losses update the feature extractor without touching the
//!   linear classifier head.
//!
//! Everything is deterministic given the seeds in the run configuration:
//! single-threaded math on `f64`, counter-derived per-purpose RNG streams,
//! and byte-stable artifact and metrics encodings.

pub mod adapt;
pub mod artifacts;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nsp;
pub mod swr;
pub mod tensor;

pub use error::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Derives an independent RNG seed from a master seed and a purpose label.
///
/// The mix is a splitmix64 pass over the master seed xored with a hash of the
/// label and index, so streams for different purposes never collide and the
/// whole experiment stays reproducible from one `u64`.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
