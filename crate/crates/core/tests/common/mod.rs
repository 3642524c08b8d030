#![allow(dead_code)]

pub mod gradcheck;
pub mod reference;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use supernet_core::dataio::ImageBatch;
use supernet_core::elastic::{child_forward, ExecMode, ForwardOptions, SupernetParams};
use supernet_core::searchspace::{biggest_config, load_space, smallest_config, SearchSpace};
use supernet_core::tensor::{distill_loss, softmax_xent, Gradients};
use supernet_core::Tensor;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn space(name: &str) -> SearchSpace {
    load_space(
        repo_root()
            .join("configs/spaces")
            .join(format!("{name}.toml")),
    )
    .expect("space file loads")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

pub fn to_ref(t: &Tensor) -> reference::T {
    reference::T::new(t.shape(), t.data().iter().map(|&v| f64::from(v)).collect())
}

/// Biggest child on labels plus the smallest child distilled from it, each
/// run and differentiated on its own.
pub fn independent_gradients(
    space: &SearchSpace,
    params: &SupernetParams,
    batch: &ImageBatch,
) -> Gradients {
    let opts = ForwardOptions::new(ExecMode::Masked);
    let big = child_forward(space, params, &biggest_config(space), &batch.images, &opts).unwrap();
    let (_, g) = softmax_xent(big.logits(), &batch.labels, 0.0).unwrap();
    let mut total = big.graph.backward(big.logits, &g).unwrap();
    let small =
        child_forward(space, params, &smallest_config(space), &batch.images, &opts).unwrap();
    let (_, g) = distill_loss(big.logits(), small.logits()).unwrap();
    total.accumulate(small.graph.backward(small.logits, &g).unwrap());
    total
}
