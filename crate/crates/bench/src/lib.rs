//! Shared fixtures for the benchmarks.

use obmreg_core::data::{make_pair, PairSpec, ScenePair};
use obmreg_core::geometry::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A reproducible scene pair with `n` points per cloud at 0.7 overlap.
pub fn fixture_pair(n: usize) -> ScenePair {
    let spec = PairSpec {
        n_points: n,
        ..PairSpec::default()
    };
    make_pair(&spec, 17).expect("fixture pair")
}

/// `n` points uniform in the unit cube.
pub fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}
