//! Single-stage weight-shared elastic supernet search.
//!
//! One supernet is trained with the sandwich rule and in-place
//! distillation; any child sliced from it is deployable after batch-norm
//! calibration. Children are then selected under a multiply-add budget by a
//! coarse grid search followed by local random mutation.
//!
//! Modules:
//! * [`searchspace`]: the elastic space, child configs, cost model.
//! * [`tensor`]: NCHW tensors, a tape-based autodiff graph, losses, RMSProp.
//! * [`elastic`]: supernet parameters, weight slicing, masked and sliced forwards.
//! * [`trainer`]: sandwich steps, learning-rate schedule, training loop.
//! * [`calibration`]: batch-norm recalibration and evaluation of children.
//! * [`selection`]: coarse-to-fine search and Pareto bookkeeping.
//! * [`dataio`]: record files, augmentation, resizing, a synthetic corpus.
//! * [`checkpoint`]: the binary checkpoint container.

pub mod calibration;
pub mod checkpoint;
pub mod dataio;
pub mod elastic;
pub mod error;
pub mod searchspace;
pub mod seed;
pub mod selection;
pub mod tensor;
pub mod trainer;

pub use calibration::{calibrate, evaluate, CalibratedChild, EvalResult};
pub use checkpoint::Checkpoint;
pub use dataio::{Dataset, DatasetManifest, ImageBatch};
pub use elastic::{init_supernet, slice_weights, ChildWeights, SupernetParams};
pub use error::{Error, Result};
pub use searchspace::{
    biggest_config, count_flops, load_space, smallest_config, space_cardinality, ChildConfig,
    SearchSpace,
};
pub use selection::{
    coarse_to_fine, BenchmarkEntry, Budget, CoarseGrid, FineOptions, SearchOutcome,
};
pub use tensor::Tensor;
pub use trainer::{train, TrainConfig, TrainOutcome, TrainRun};
