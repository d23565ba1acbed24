//! Ground-truth assignment, training targets and losses.

pub mod atss;
pub mod loss;
pub mod targets;

pub use atss::{anchor_box, atss_assign, mean_plus_std, Assignment, AtssConfig};
pub use loss::{
    focal_loss, focal_loss_sum, giou_loss, giou_loss_sum, quality_loss, quality_loss_sum, soft_bce,
    total_loss, LossTermSet, LossValue, LossWeights,
};
pub use targets::{
    build_targets, sample_pseudo_negatives, Cell, GroundTruth, TargetMatrix, TargetMode,
};
