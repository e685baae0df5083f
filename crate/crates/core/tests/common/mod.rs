#![allow(dead_code)]

use gksnet::synth::{generate_synthetic_pair, SynthConfig};
use gksnet::preclass::ImagePair;
use gksnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `|a - b| <= tol * max(1, |b|)` elementwise.
pub fn assert_close(actual: &Tensor, expected: &Tensor, tol: f64, what: &str) {
    assert_eq!(actual.shape(), expected.shape(), "{what}: shape");
    for (i, (a, b)) in actual.data().iter().zip(expected.data()).enumerate() {
        assert!(
            (a - b).abs() <= tol * b.abs().max(1.0),
            "{what}: entry {i} differs: {a} vs {b}"
        );
    }
}

pub fn small_pair(seed: u64, size: usize) -> ImagePair {
    generate_synthetic_pair(&SynthConfig {
        height: size,
        width: size,
        n_regions: 6,
        seed,
        ..Default::default()
    })
    .unwrap()
}
