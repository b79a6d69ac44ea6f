//! Two-stage training, evaluation and run artifacts.
//!
//! A run directory holds `config.toml`, `metrics.csv`, `summary.json`,
//! `model.ckpt` and, in `rtk` mode, `attention.ckpt` plus one attention
//! export per epoch under `attention/`.

pub mod config;
pub mod metrics;
pub mod optim;
pub mod train;

pub use config::{
    ArchConfig, DataConfig, ExperimentConfig, Profile, RtkSettings, SelectionCadence, TapPreset, TapSpec,
    TrainMode, TrainerConfig, CIFAR_DIR_ENV,
};
pub use metrics::{accuracy, binary_auc, evaluate, roc_auc, Evaluation, RocAuc};
pub use optim::{lr_at, Sgd};
pub use train::{
    check_tap_compatibility, derive_seed, read_metrics, train_student, train_teacher, MetricsRow, RunArtifacts,
    RunSummary,
};
