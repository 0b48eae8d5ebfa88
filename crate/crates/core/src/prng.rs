//! SplitMix64 source for the shared hidden-state sequence.
//!
//! Both stations derive the same sequence of hidden angles from a common
//! seed. The k-th output of a SplitMix64 stream is a pure function of
//! `(seed, k)`, so any element can be computed without replaying the prefix.

use std::f64::consts::TAU;

use crate::model::HiddenState;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// State of a SplitMix64 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedState {
    pub state: u64,
}

impl SeedState {
    pub fn new(state: u64) -> Self {
        Self { state }
    }
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Advances the generator once, returning the new state and the output word.
#[inline]
pub fn next_raw(s: SeedState) -> (SeedState, u64) {
    let state = s.state.wrapping_add(GOLDEN_GAMMA);
    (SeedState { state }, mix(state))
}

/// Output number `index` (zero-based) of the stream started at `seed`.
#[inline]
pub fn nth_raw(seed: u64, index: u64) -> u64 {
    mix(seed.wrapping_add(GOLDEN_GAMMA.wrapping_mul(index.wrapping_add(1))))
}

/// Maps the top 53 bits of `x` onto `[0, 2π)`.
#[inline]
pub fn u64_to_angle(x: u64) -> HiddenState {
    let unit = (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let lambda = TAU * unit;
    // TAU * (1 - 2^-53) rounds to TAU in double precision.
    HiddenState::new(if lambda < TAU { lambda } else { TAU.next_down() })
}

/// The hidden state of trial `k` for the given seed.
#[inline]
pub fn hidden_state_at(seed: u64, k: u64) -> HiddenState {
    u64_to_angle(nth_raw(seed, k))
}

/// Returns exactly `n` hidden states derived from `seed`.
pub fn hidden_state_stream(seed: u64, n: usize) -> Vec<HiddenState> {
    let mut s = SeedState::new(seed);
    (0..n)
        .map(|_| {
            let (next, x) = next_raw(s);
            s = next;
            u64_to_angle(x)
        })
        .collect()
}

/// Uniform index in `0..len` for output `index` of a stream. Uses the
/// multiply-high reduction so the result depends only on the raw word.
#[inline]
pub fn uniform_index(seed: u64, index: u64, len: usize) -> usize {
    debug_assert!(len > 0);
    ((nth_raw(seed, index) as u128 * len as u128) >> 64) as usize
}

/// Parses a seed given as decimal or `0x`-prefixed hexadecimal.
pub fn parse_seed(text: &str) -> Result<u64, std::num::ParseIntError> {
    let t = text.trim();
    match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16),
        None => t.replace('_', "").parse::<u64>(),
    }
}
