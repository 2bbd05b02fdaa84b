//! Deterministic randomness.
//!
//! Every random choice in the crate flows from an explicit `u64` seed through
//! a counter-based ChaCha stream, so any component reproduces bit-for-bit in
//! isolation and across platforms.
//!
//! Sub-seed scheme: a component holding seed `s` gives stream `i` the seed
//! `derive_seed(s, i)`. The streams used by each module are fixed:
//!
//! * dataset generation: stream 0 for class 0 draws, stream 1 for class 1
//! * parameter init: one stream per parameter tensor, in declaration order
//! * training: epoch `e` shuffles with stream `1000 + e`; the adversary for
//!   sample `i` of batch `b` in epoch `e` uses
//!   `derive_seed(derive_seed(derive_seed(seed, 1000 + e), b), i)`
//! * attacks: restart `r` uses stream `r`; batched attack entry `i` first
//!   derives stream `i`
//! * evaluation: attack row `k` derives stream `2000 + k`, then per-sample
//!   streams

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for the given seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed for sub-stream `stream` of the generator family rooted at `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` with 53 random mantissa bits.
pub fn unit_uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit_uniform(rng)
}

/// Standard normal draw via the Box-Muller transform.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // 1 - u keeps the log argument in (0, 1].
    let u = 1.0 - unit_uniform(rng);
    let v = unit_uniform(rng);
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

/// In-place Fisher-Yates shuffle. Indices come from 53-bit uniforms, so the
/// bias for any realistic slice length is far below measurability, and the
/// permutation for a given generator state is fixed.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, xs: &mut [T]) {
    for i in (1..xs.len()).rev() {
        let j = (unit_uniform(rng) * (i + 1) as f64) as usize;
        xs.swap(i, j.min(i));
    }
}
