#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refquery::model::ClipInputs;
use refquery::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Random stacked inputs for `frames` frames over the given scales.
pub fn random_inputs(
    rng: &mut ChaCha8Rng,
    frames: usize,
    levels: &[(usize, usize)],
    channels: &[usize],
    tokens: usize,
    text_channels: usize,
) -> ClipInputs<f64> {
    ClipInputs {
        frames,
        levels: levels.to_vec(),
        scales: levels
            .iter()
            .zip(channels)
            .map(|(&(h, w), &c)| random_tensor(rng, &[frames * h * w, c]))
            .collect(),
        text: random_tensor(rng, &[tokens, text_channels]),
    }
}

pub fn assert_bitwise(a: &Tensor<f64>, b: &Tensor<f64>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape");
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert_eq!(x.to_bits(), y.to_bits(), "{what}: element {i} ({x} vs {y})");
    }
}
