//! Self-training on an image-caption corpus: one offline pseudo-labelling
//! pass with a trained teacher, then joint supervised + pseudo training.

pub mod joint;
pub mod pseudo;

use serde::{Deserialize, Serialize};

use crate::assign::LossTermSet;
use crate::error::{Error, Result};

pub use joint::{joint_step, pseudo_batch, pseudo_sample, run_self_training, JointLoss};
pub use pseudo::{pseudo_label, select_detic, select_threeway, PseudoLabel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelfTrainMethod {
    /// Teacher detection with the whole caption as the query.
    #[default]
    Threeway,
    /// Largest confident box, caption ignored for localization.
    DeticDagger,
    /// The whole image as the box.
    ImageBbox,
}

impl SelfTrainMethod {
    pub fn default_terms(self) -> LossTermSet {
        match self {
            SelfTrainMethod::Threeway => LossTermSet::AllThree,
            _ => LossTermSet::ClassificationOnly,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainConfig {
    pub method: SelfTrainMethod,
    pub batch_negatives: bool,
    pub confidence: f32,
    pub detic_quality_threshold: f32,
    /// `None` picks the method's default.
    pub pseudo_loss_terms: Option<LossTermSet>,
    pub pseudo_resolution_scale: f64,
    /// Uniform range of the extra scale factor applied to pseudo images.
    pub jitter: [f64; 2],
    /// Also add sampled class pseudo-negatives to pseudo images.
    pub pseudo_negatives_in_pseudo_batches: bool,
    /// `None` reuses the supervised epoch count.
    pub epochs: Option<usize>,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            method: SelfTrainMethod::Threeway,
            batch_negatives: true,
            confidence: 0.25,
            detic_quality_threshold: 0.75,
            pseudo_loss_terms: None,
            pseudo_resolution_scale: 0.5,
            jitter: [0.8, 1.25],
            pseudo_negatives_in_pseudo_batches: false,
            epochs: None,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("confidence", self.confidence),
            ("detic_quality_threshold", self.detic_quality_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!(
                    "selftrain.{name} = {v} must lie in (0, 1)"
                )));
            }
        }
        let [lo, hi] = self.jitter;
        if !(self.pseudo_resolution_scale > 0.0 && lo > 0.0 && lo <= hi) {
            return Err(Error::Config(
                "pseudo resolution scale and jitter must be positive with lo <= hi".into(),
            ));
        }
        Ok(())
    }

    pub fn terms(&self) -> LossTermSet {
        self.pseudo_loss_terms
            .unwrap_or(self.method.default_terms())
    }
}
