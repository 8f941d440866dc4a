//! Neural frailty machines for right-censored survival data.
//!
//! Hazards follow `λ(t | Z, ω) = ω · exp(ν(t, Z))` with a frailty `ω` whose
//! negative log Laplace transform `G_θ` maps the conditional cumulative hazard
//! to the marginal one. `ν` is learned either as `h(t) + m(Z)` with two
//! networks (proportional frailty) or as one network over `(t, Z)` (fully
//! neural), by maximizing the observed log-likelihood.

pub mod cli;
pub mod data;
pub mod error;
pub mod frailty;
pub mod metrics;
pub mod nn;
pub mod quadrature;
pub mod synth;

pub use error::{NfmError, Result};
pub mod model;

/// Independent 64-bit seed for stream `stream` of a run seeded with `seed` (splitmix64 finalizer).
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
