//! Seeded randomness.
//!
//! Every random choice in the crate draws from [`SeededRng`], a ChaCha8
//! stream cipher generator (`rand_chacha::ChaCha8Rng`). ChaCha8 output is
//! defined bit-for-bit independently of platform and endianness, and the
//! `seed_from_u64` expansion is likewise portable, so identical seeds give
//! identical streams everywhere. Uniform integer draws go through `u64`
//! ranges so results never depend on the width of `usize`.
//!
//! Independent streams for one logical seed are obtained with
//! [`derive_seed`], a SplitMix64 finalizer over `(seed, stream)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a stream label into a seed. Distinct labels give statistically
/// independent generators for the same base seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform index in `0..n`. Panics if `n == 0`.
pub fn index(rng: &mut SeededRng, n: usize) -> usize {
    rng.gen_range(0..n as u64) as usize
}

/// Uniform `f64` in `[0, 1)`.
pub fn unit(rng: &mut SeededRng) -> f64 {
    rng.gen::<f64>()
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut SeededRng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = index(rng, i + 1);
        items.swap(i, j);
    }
}

/// `amount` distinct indices drawn uniformly without replacement from
/// `0..len`, in draw order (partial Fisher-Yates over an index vector).
pub fn sample_indices(rng: &mut SeededRng, len: usize, amount: usize) -> Vec<usize> {
    assert!(amount <= len, "cannot sample {amount} of {len}");
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..amount {
        let j = i + index(rng, len - i);
        pool.swap(i, j);
    }
    pool.truncate(amount);
    pool
}
