//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlfuse_core::Tensor;

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(&[rows, cols], data).expect("shape")
}

/// Text rows `L×d` and visual rows `N×d`.
pub fn attention_inputs(l: usize, n: usize, d: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (random_matrix(l, d, &mut rng), random_matrix(n, d, &mut rng))
}
