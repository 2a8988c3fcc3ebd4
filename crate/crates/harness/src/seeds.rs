//! Per-trial seed derivation.
//!
//! A trial's seed depends only on `(base, cell, trial)`:
//!
//! ```text
//! trial_seed = mix(mix(mix(base) ^ cell) ^ trial)
//! ```
//!
//! where `mix` is the SplitMix64 finalizer. Trials can therefore run in any
//! order or on any thread without changing their random streams.

/// SplitMix64 step: golden-ratio increment followed by the output mix.
pub fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn trial_seed(base: u64, cell: u64, trial: u64) -> u64 {
    mix(mix(mix(base) ^ cell) ^ trial)
}
