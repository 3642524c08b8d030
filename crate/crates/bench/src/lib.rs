//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use supernet_core::dataio::ImageBatch;
use supernet_core::searchspace::parse_space;
use supernet_core::{SearchSpace, Tensor};

const TOY: &str = include_str!("../../../configs/spaces/toy.toml");
const TABLE1: &str = include_str!("../../../configs/spaces/table1.toml");

pub fn toy_space() -> SearchSpace {
    parse_space(TOY, "toy.toml").expect("toy space parses")
}

pub fn table1_space() -> SearchSpace {
    parse_space(TABLE1, "table1.toml").expect("table1 space parses")
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Random images with cycling labels.
pub fn batch(n: usize, resolution: usize, classes: usize, seed: u64) -> ImageBatch {
    ImageBatch {
        images: randn(&[n, 3, resolution, resolution], seed),
        labels: (0..n).map(|i| i % classes).collect(),
    }
}
