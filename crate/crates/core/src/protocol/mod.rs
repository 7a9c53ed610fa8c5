//! Leave-one-out cross-domain protocol: configuration, data splits,
//! training, evaluation and checkpoints.

mod config;
mod cross;
mod data;
mod gradcheck;
mod model;
mod train;

pub use config::{DataConfig, ModelConfig, OptimizerConfig, ProtocolConfig};
pub use cross::{
    adversarial_ablation, cross_dataset_run, cross_dataset_run_on, fold_plan, seed_options, AblationReport,
    AblationRow, AblationRuns, CrossOptions, CrossReport, FoldResult,
};
pub use data::{fold_seed, load_dataset, AuditedDataset, Batch, BatchSampler, Splits};
pub use gradcheck::composed_gradient_check;
pub use model::{
    load_checkpoint, load_into, read_checkpoint, save_checkpoint, AnyModel, CheckpointHeader, EntryHeader, Forward,
    Model, CHECKPOINT_VERSION,
};
pub use train::{evaluate_fold, score_samples, train_fold, RunRecord, Scorer, StepLosses, EVAL_CHUNK};
