//! Portable seed derivation. Every random stream in the crate is keyed by a
//! 64-bit seed derived here, so replays are bit-identical across runs and
//! platforms. No use of the standard library hasher (its output is not
//! stable across releases).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One splitmix64 scramble step.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Absorbs a base seed, a purpose tag and an index into one derived seed.
/// Distinct tags produce independent streams from the same base.
pub fn derive(base: u64, tag: &str, index: u64) -> u64 {
    let mut state = base ^ 0x5851_f42d_4c95_7f2d;
    let mut out = splitmix64(&mut state);
    for &b in tag.as_bytes() {
        state ^= u64::from(b);
        out ^= splitmix64(&mut state);
    }
    state ^= index;
    out ^ splitmix64(&mut state)
}

/// Seeded portable generator for all sampling in the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
