//! Optimization and evaluation: AdamW, mixup and spectrogram masking,
//! losses, ranking metrics, checkpoint averaging, the epoch loop, and
//! finite-difference gradient checking.

mod augment;
mod average;
mod config;
pub mod gradcheck;
mod loss;
mod metrics;
mod optim;
mod synth;
mod trainer;

pub use augment::{apply_masks, mixup, sample_lambda, spec_augment, AugmentConfig, Band};
pub use average::{average_checkpoints, average_files};
pub use config::{ExperimentConfig, RunConfig};
pub use gradcheck::{
    check_against, check_gradients, model_gradcheck, relative_error, GradcheckReport,
    SegmentedForward,
};
pub use loss::{loss, target_row, Task};
pub use metrics::{accuracy, argmax, average_precision, mean_average_precision};
pub use optim::{adamw_step, OptimConfig, OptimState};
pub use synth::synthetic_multilabel;
pub use trainer::{
    evaluate, task_metric, train, train_from_manifest, Dataset, Evaluation, MetricRecord,
    TrainOutcome,
};
