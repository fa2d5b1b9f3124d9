//! Trainable and external classifiers, optimizers, patching and fusion.

pub mod checkpoint;
pub mod classifier;
mod conv;
pub mod external;
pub mod net;
pub mod optim;
pub mod patch;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use classifier::{BlockVote, Classifier, FnClassifier, PatchEnsemble};
pub use external::ExternalClassifier;
pub use net::{argmax, gradient_check, softmax, ConvSpec, FrontEnd, TinyNet, TinyNetArch};
pub use optim::{adamax_step, sgd_momentum_step, LrSchedule, OptimizerKind, OptimizerState};
pub use patch::{
    extract_blocks, extract_blocks_48, extract_five_crops, fuse_predictions, fuse_scores,
    FusionRule, PatchPosition, PatchSpec,
};
pub use train::{train_on_samples, train_tinynet, EpochRecord, TrainConfig, TrainState};
