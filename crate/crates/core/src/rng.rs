//! Seeded generators. Every stochastic choice in the crate draws from a
//! [`ChaCha8Rng`] whose seed is derived from a root seed and a stream label,
//! so independent consumers never share a stream.

pub use rand::Rng;
pub use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

use crate::autodiff::counter_uniform;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a root seed with a stream label into an independent seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    (counter_uniform(seed, stream) * (1u64 << 53) as f64) as u64 ^ stream.rotate_left(32)
}

/// Generator for `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    seeded(derive_seed(seed, stream))
}

/// Fisher-Yates sample of `k` distinct indices from `0..n`, in draw order.
pub fn sample_indices<R: Rng>(rng: &mut R, n: usize, k: usize) -> alloc::vec::Vec<usize> {
    let mut pool: alloc::vec::Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
