//! Seed derivation.
//!
//! Every derived seed is an output of the SplitMix64 generator:
//! `mix_seed(seed, i)` is the `(i + 1)`-th output of the SplitMix64 stream
//! whose state starts at `seed`. Frame `f` of a sweep uses
//! `mix_seed(master_seed, f)`; user `k`'s interleaver and pilots use
//! `mix_seed(interleaver_seed, k)` and `mix_seed(pilot_seed, k)`.

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn mix_seed(seed: u64, index: u64) -> u64 {
    finalize(seed.wrapping_add(GOLDEN_GAMMA.wrapping_mul(index.wrapping_add(1))))
}
