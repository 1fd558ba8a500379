//! Network descriptions, instantiated networks, training, checkpoints and
//! the whole-network gradient oracle.

mod checkpoint;
mod gradcheck;
mod model;
mod spec;
mod train;

pub use checkpoint::{BestRecord, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{
    gradcheck_network, gradcheck_with, relative_error, tiny_specs, GradcheckFailure, GradcheckReport, LayerGradcheck,
    REL_FLOOR, STEP,
};
pub use model::{ForwardPass, Network};
pub use spec::{
    Architecture, Encoding, LayerSpec, NetworkSpec, Shape, BASELINE_WIDTHS, HIDDEN_UNITS, MNIST_CLASSES, ORN_WIDTHS,
};
pub use train::{evaluate, to_batch, train, EpochMetrics, Evaluation, Precision, TrainConfig, TrainOutcome, TrainState};
