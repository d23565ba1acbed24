//! Whole runs: backbone pretraining, the supervised teacher and the
//! self-trained student, each ending in an evaluation on the validation split.

use crate::data::{CaptionRecord, DetectionDataset, EvalReport, ImageStore};
use crate::error::Result;
use crate::net::Detector;
use crate::numeric::ParamStore;
use crate::selftrain::{pseudo_label, run_self_training, PseudoLabel};
use crate::text::EmbeddingBank;
use crate::train::{
    annotated_vocabulary, evaluate_model, init_detector, prepare_dataset, pretrain_backbone,
    train_supervised, EpochLog, TrainConfig,
};

/// Class-query bank for training, with the configured variants.
pub fn class_bank(vocab: &[String], cfg: &TrainConfig) -> Result<EmbeddingBank> {
    EmbeddingBank::for_classes(
        vocab,
        cfg.model.cls_dim,
        cfg.variants,
        cfg.dropout_rate,
        cfg.seed,
    )
}

/// Base caption embeddings, as used by the teacher when labelling.
pub fn caption_bank(captions: &[CaptionRecord], dim: usize) -> Result<EmbeddingBank> {
    let mut texts: Vec<String> = captions.iter().map(|c| c.caption.clone()).collect();
    texts.sort();
    texts.dedup();
    EmbeddingBank::for_texts(&texts, dim, 1, 0.0, 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub params: ParamStore,
    pub history: Vec<EpochLog>,
    pub report: EvalReport,
}

pub fn pretrain(
    cfg: &TrainConfig,
    captions: &[CaptionRecord],
    images: &ImageStore,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<(ParamStore, Vec<EpochLog>)> {
    cfg.validate()?;
    let det = Detector::new(cfg.model.clone())?;
    pretrain_backbone(&det, captions, images, cfg, log)
}

/// Supervised training from a fresh head and, optionally, a pretrained
/// backbone.
pub fn train_teacher(
    cfg: &TrainConfig,
    train: &DetectionDataset,
    val: &DetectionDataset,
    images: &ImageStore,
    pretrained: Option<&ParamStore>,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<TrainedModel> {
    cfg.validate()?;
    let det = Detector::new(cfg.model.clone())?;
    let data = prepare_dataset(train, images, det.config().size_divisor())?;
    let vocab = annotated_vocabulary(train);
    let bank = class_bank(&vocab, cfg)?;
    let mut params = init_detector(&det, cfg.seed, pretrained)?;
    let history = train_supervised(&det, &mut params, &data, &vocab, &bank, cfg, log)?;
    let report = evaluate_model(&det, &params, val, images, cfg)?;
    Ok(TrainedModel {
        params,
        history,
        report,
    })
}

pub fn label_corpus(
    cfg: &TrainConfig,
    teacher: &ParamStore,
    captions: &[CaptionRecord],
    images: &ImageStore,
) -> Result<Vec<PseudoLabel>> {
    cfg.validate()?;
    let det = Detector::new(cfg.model.clone())?;
    let bank = caption_bank(captions, cfg.model.cls_dim)?;
    pseudo_label(&det, teacher, captions, images, &bank, &cfg.selftrain)
}

/// Joint training of a student initialised from `teacher`.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    cfg: &TrainConfig,
    teacher: &ParamStore,
    labels: &[PseudoLabel],
    train: &DetectionDataset,
    val: &DetectionDataset,
    images: &ImageStore,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<TrainedModel> {
    cfg.validate()?;
    let det = Detector::new(cfg.model.clone())?;
    let data = prepare_dataset(train, images, det.config().size_divisor())?;
    let vocab = annotated_vocabulary(train);
    let bank = class_bank(&vocab, cfg)?;
    let (params, history) = run_self_training(
        &det, teacher, &data, &vocab, &bank, labels, images, cfg, log,
    )?;
    let report = evaluate_model(&det, &params, val, images, cfg)?;
    Ok(TrainedModel {
        params,
        history,
        report,
    })
}
