//! Deterministic inputs shared by the benchmarks.

use fas_core::metrics::ScoreSet;
use fas_core::synth::Label;
use fas_core::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_images(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data = (0..size * size * 3).map(|_| rng.random::<f32>()).collect();
            Image::new(size, size, 3, data).expect("valid image")
        })
        .collect()
}

/// `n` scores with about a third tied, half of them real.
pub fn random_scores(n: usize, seed: u64) -> ScoreSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.3) { 0.5 } else { rng.random() })
        .collect();
    let labels: Vec<Label> = (0..n)
        .map(|i| if i % 2 == 0 { Label::Real } else { Label::Fake })
        .collect();
    ScoreSet::from_pairs(&scores, &labels).expect("finite scores")
}
