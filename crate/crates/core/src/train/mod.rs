//! Configuration, optimization and the training loops.

pub mod config;
pub mod manifest;
pub mod optim;
pub mod pretrain;
pub mod trainer;

pub use config::{apply_override, code_hash, PretrainConfig, TrainConfig};
pub use manifest::RunManifest;
pub use optim::{agc_scale, lr_at, AdamW};
pub use pretrain::{pretrain_backbone, pretrain_loss};
pub use trainer::{
    annotated_vocabulary, class_queries, detect_dataset, evaluate_model, image_gradients,
    init_detector, prepare_dataset, steps_per_epoch, supervised_batch, train_supervised, EpochLog,
    GradAccum, ImageObjective, LossTotals, Prepared,
};
