//! Shared fixtures for the benchmarks.

use cacscore::phantom::{generate_phantom, PhantomSpec, PhantomTruth};
use cacscore::volume::Volume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default desk phantom with a few lesions.
pub fn phantom(seed: u64) -> (Volume, PhantomTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_phantom(&PhantomSpec::random_desk(&mut rng, 3..=3, seed)).expect("desk phantom")
}

/// Paired scores with multiplicative noise.
pub fn score_pairs(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s: f64 = rng.random_range(0.0..800.0);
            (s * rng.random_range(0.8..1.2), s * rng.random_range(0.8..1.2))
        })
        .unzip()
}
