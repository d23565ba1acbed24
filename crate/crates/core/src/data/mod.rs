//! Datasets, the synthetic shapes benchmark and mAP evaluation.

pub mod dataset;
pub mod eval;
pub mod synth;

pub use dataset::{
    image_tensor, load_images, save_images, zero_shot_split, Annotation, CaptionRecord, Category,
    DetectionDataset, FrequencyGroup, ImageInfo, ImageStore,
};
pub use eval::{
    aggregate_seeds, average_precision, coco_thresholds, evaluate, mean_std, EvalReport, MeanStd,
    SeedSummary,
};
pub use synth::{make_synthetic, render_mask, ShapeKind, SyntheticBundle, SyntheticSpec, PALETTE};
