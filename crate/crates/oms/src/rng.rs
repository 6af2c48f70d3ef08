//! Deterministic, counter-based random streams.
//!
//! Every stochastic component of a run draws from a private ChaCha stream
//! keyed by `(master seed, run id, stream id)`. Keys are derived, not shared
//! state, so streams are independent of execution order: parallel and serial
//! execution of the same experiment produce bit-identical results, and
//! raising `num_runs` leaves the draws of earlier runs unchanged.
//!
//! Within a run, stream ids are laid out as: one stream per data source
//! (id = source index), then the policy stream (id = `|D|`) used for
//! ε-greedy exploration coin flips, then the nuisance stream (id = `|D|+1`)
//! for random-feature draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream id of the sampler for `source` (0-based).
pub fn source_stream(source: usize) -> u64 {
    source as u64
}

/// Stream id of the policy's own randomness (uniform exploration draws).
pub fn policy_stream(num_sources: usize) -> u64 {
    num_sources as u64
}

/// Stream id of nuisance fitting (random-feature draws).
pub fn nuisance_stream(num_sources: usize) -> u64 {
    num_sources as u64 + 1
}

/// SplitMix64 finalizer; full-avalanche mixing of a 64-bit word.
fn mix(z: u64) -> u64 {
    let z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the ChaCha generator for one `(master seed, run, stream)` key.
///
/// The three key components are folded through SplitMix64 with distinct
/// multipliers so that adjacent run or stream ids yield unrelated 256-bit
/// ChaCha keys.
pub fn derive_rng(master_seed: u64, run_id: u64, stream_id: u64) -> ChaCha8Rng {
    let mut state = mix(master_seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    state = mix(state ^ run_id.wrapping_mul(0xD1B5_4A32_D192_ED03));
    state = mix(state ^ stream_id.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7));

    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        state = mix(state.wrapping_add(0x9E37_79B9_7F4A_7C15));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
