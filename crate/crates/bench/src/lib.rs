//! Seeded inputs shared by the benchmarks.

use gmcn::harness::random_mixture;
use gmcn::network::{Model, ModelSpec};
use gmcn::{Gaussian, MixtureBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `n` random 2D Gaussians, 40% of them negative when `signed`.
pub fn mixture(n: usize, dims: usize, signed: bool, seed: u64) -> Vec<Gaussian> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_mixture(&mut rng, n, dims, if signed { 0.4 } else { 0.0 })
}

/// A batch of `b` single-channel samples with `n` positive Gaussians each.
pub fn batch(b: usize, n: usize, seed: u64) -> MixtureBatch {
    let gs: Vec<Gaussian> = (0..b).flat_map(|i| mixture(n, 2, false, seed + i as u64)).collect();
    MixtureBatch::new(2, b, 1, n, gs).expect("consistent shape")
}

/// The toy-task network: 16 input Gaussians, one 8-channel block, 3 classes.
pub fn toy_model(seed: u64) -> Model {
    Model::new(ModelSpec::halving(2, 16, &[8], 3, 5), seed).expect("valid spec")
}
