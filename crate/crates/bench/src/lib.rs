//! Inputs shared by the benchmarks.

use mrfusion::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `n` rows of `f` features with labels in `1..=classes`.
pub fn labeled(n: usize, f: usize, classes: u32, seed: u64) -> (Tensor<f32>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<u32> = (0..n).map(|_| rng.random_range(1..=classes)).collect();
    let x = Tensor::from_fn(&[n, f], |i| y[i / f] as f32 * 0.1 + rng.random_range(0.0..1.0));
    (x, y)
}
