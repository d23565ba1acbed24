//! Supervised detector training and whole-dataset evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::lr_at;
use crate::assign::{
    atss_assign, build_targets, sample_pseudo_negatives, total_loss, GroundTruth, LossTermSet,
    TargetMode,
};
use crate::data::{
    coco_thresholds, evaluate, image_tensor, DetectionDataset, EvalReport, ImageStore,
};
use crate::error::{Error, Result};
use crate::geom::{locations, Bbox};
use crate::infer::{detect, DetectionRecord};
use crate::net::Detector;
use crate::numeric::{ParamStore, Tape, Tensor};
use crate::text::EmbeddingBank;

/// A network-ready image with its boxes in tensor pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: u64,
    pub image: Tensor,
    pub width: f32,
    pub height: f32,
    pub gts: Vec<GroundTruth>,
}

/// Converts every image of `ds` (annotations become class-name queries).
pub fn prepare_dataset(
    ds: &DetectionDataset,
    images: &ImageStore,
    divisor: usize,
) -> Result<Vec<Prepared>> {
    let by_image = ds.by_image();
    ds.images
        .iter()
        .map(|im| {
            let px = images
                .get(&im.id)
                .ok_or_else(|| Error::Data(format!("no pixels for image {}", im.id)))?;
            let gts = by_image[&im.id]
                .iter()
                .map(|a| {
                    let name = &ds
                        .category(a.category_id)
                        .ok_or_else(|| {
                            Error::Data(format!("annotation {} has unknown category", a.id))
                        })?
                        .name;
                    Ok(GroundTruth {
                        bbox: a.bbox(),
                        query: name.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Prepared {
                id: im.id,
                image: image_tensor(px, divisor),
                width: im.width as f32,
                height: im.height as f32,
                gts,
            })
        })
        .collect()
}

/// Categories that have at least one annotation in `ds`, in table order.
pub fn annotated_vocabulary(ds: &DetectionDataset) -> Vec<String> {
    ds.categories
        .iter()
        .filter(|c| ds.annotations.iter().any(|a| a.category_id == c.id))
        .map(|c| c.name.clone())
        .collect()
}

/// Running sums of the loss terms over a stretch of training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTotals {
    pub total: f64,
    pub focal: f64,
    pub giou: f64,
    pub quality: f64,
    pub images: usize,
}

impl LossTotals {
    fn add(&mut self, total: f64, focal: f64, giou: f64, quality: f64) {
        self.total += total;
        self.focal += focal;
        self.giou += giou;
        self.quality += quality;
        self.images += 1;
    }

    pub fn merge(&mut self, o: &LossTotals) {
        self.total += o.total;
        self.focal += o.focal;
        self.giou += o.giou;
        self.quality += o.quality;
        self.images += o.images;
    }

    pub fn mean(&self) -> LossTotals {
        let n = self.images.max(1) as f64;
        LossTotals {
            total: self.total / n,
            focal: self.focal / n,
            giou: self.giou / n,
            quality: self.quality / n,
            images: self.images,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Per-image means.
    pub loss: LossTotals,
}

/// Gradient sums index-aligned with a [`ParamStore`].
pub struct GradAccum {
    pub sums: Vec<Tensor>,
}

impl GradAccum {
    pub fn zeros(params: &ParamStore) -> Self {
        Self {
            sums: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, grads: &[Tensor], s: f32) {
        for (acc, g) in self.sums.iter_mut().zip(grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b * s;
            }
        }
    }
}

/// What one image contributes to a training step.
pub struct ImageObjective<'a> {
    pub image: &'a Tensor,
    pub gts: &'a [GroundTruth],
    pub in_play: &'a [String],
    /// One embedding per in-play query.
    pub embeddings: Vec<&'a [f32]>,
    pub bank: &'a EmbeddingBank,
    pub mode: TargetMode,
    pub terms: LossTermSet,
}

/// Loss value and parameter gradients for one image.
pub fn image_gradients(
    det: &Detector,
    params: &ParamStore,
    obj: &ImageObjective<'_>,
    cfg: &TrainConfig,
) -> Result<(LossTotals, Vec<Tensor>)> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape)?;
    let out = det.forward(&mut tape, &bound, obj.image)?;
    let locs = locations(&out.grids());
    let boxes: Vec<Bbox> = obj.gts.iter().map(|g| g.bbox).collect();
    let assignment = atss_assign(&locs, &boxes, &cfg.atss)?;
    let targets = build_targets(&assignment, obj.gts, obj.in_play, obj.mode, obj.bank)?;
    let lv = total_loss(
        &mut tape,
        &out,
        &targets,
        &obj.embeddings,
        &cfg.loss,
        obj.terms,
    )?;
    let total = tape.item(lv.total);
    let grads = tape.backward(lv.total)?;
    let mut t = LossTotals::default();
    t.add(total, lv.focal, lv.giou, lv.quality);
    Ok((t, bound.collect_grads(&tape, &grads)))
}

/// Adds the mean-over-batch supervised gradients to `acc`.
#[allow(clippy::too_many_arguments)]
pub fn supervised_batch(
    det: &Detector,
    params: &ParamStore,
    batch: &[&Prepared],
    vocab: &[String],
    bank: &EmbeddingBank,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    acc: &mut GradAccum,
) -> Result<LossTotals> {
    let mut totals = LossTotals::default();
    let scale = 1.0 / batch.len().max(1) as f32;
    for s in batch {
        let mut in_play: Vec<String> = Vec::new();
        for g in &s.gts {
            if !in_play.contains(&g.query) {
                in_play.push(g.query.clone());
            }
        }
        let negs = sample_pseudo_negatives(&in_play, vocab, cfg.pseudo_negatives, rng);
        in_play.extend(negs);
        let embeddings = in_play
            .iter()
            .map(|q| bank.sample(q, rng))
            .collect::<Result<Vec<_>>>()?;
        let obj = ImageObjective {
            image: &s.image,
            gts: &s.gts,
            in_play: &in_play,
            embeddings,
            bank,
            mode: TargetMode::Supervised,
            terms: LossTermSet::AllThree,
        };
        let (t, g) = image_gradients(det, params, &obj, cfg)?;
        acc.add_scaled(&g, scale);
        totals.merge(&t);
    }
    Ok(totals)
}

pub fn steps_per_epoch(num_images: usize, batch_size: usize) -> usize {
    num_images.div_ceil(batch_size.max(1)).max(1)
}

/// Fresh parameters for `det`, with the backbone copied from `pretrained`.
pub fn init_detector(
    det: &Detector,
    seed: u64,
    pretrained: Option<&ParamStore>,
) -> Result<ParamStore> {
    let mut p = det.init_params(seed)?;
    if let Some(pre) = pretrained {
        if p.copy_prefixed(pre, "backbone.") == 0 {
            return Err(Error::Config(
                "pretrained checkpoint has no backbone parameters".into(),
            ));
        }
    }
    Ok(p)
}

/// Supervised training on `data` for `cfg.epochs` epochs.
pub fn train_supervised(
    det: &Detector,
    params: &mut ParamStore,
    data: &[Prepared],
    vocab: &[String],
    bank: &EmbeddingBank,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::Data("no training images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = cfg.optimizer();
    let per_epoch = steps_per_epoch(data.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut totals = LossTotals::default();
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let mut acc = GradAccum::zeros(params);
            totals.merge(&supervised_batch(
                det, params, &batch, vocab, bank, cfg, &mut rng, &mut acc,
            )?);
            lr = lr_at(step, total, cfg.base_lr, cfg);
            opt.step(params, &acc.sums, lr)?;
            step += 1;
        }
        let entry = EpochLog {
            stage: "train".into(),
            epoch,
            steps: step,
            lr,
            loss: totals.mean(),
        };
        log(&entry);
        history.push(entry);
    }
    Ok(history)
}

/// `(name, base embedding)` for every category of `ds`.
pub fn class_queries(ds: &DetectionDataset, dim: usize) -> Result<Vec<(String, Vec<f32>)>> {
    let names = ds.category_names();
    let bank = EmbeddingBank::for_classes(&names, dim, 1, 0.0, 0)?;
    names
        .into_iter()
        .map(|n| {
            let e = bank.base(&n)?.to_vec();
            Ok((n, e))
        })
        .collect()
}

/// Runs detection with every category as a query on every image of `ds`.
pub fn detect_dataset(
    det: &Detector,
    params: &ParamStore,
    ds: &DetectionDataset,
    images: &ImageStore,
    cfg: &TrainConfig,
) -> Result<Vec<DetectionRecord>> {
    let queries = class_queries(ds, det.config().cls_dim)?;
    let divisor = det.config().size_divisor();
    let mut out = Vec::new();
    for im in &ds.images {
        let px = images
            .get(&im.id)
            .ok_or_else(|| Error::Data(format!("no pixels for image {}", im.id)))?;
        let t = image_tensor(px, divisor);
        let dets = detect(det, params, &t, &queries, &cfg.inference)?;
        out.extend(dets.into_iter().map(|d| DetectionRecord {
            image_id: im.id,
            query: d.query,
            bbox: d.bbox.clip(im.width as f32, im.height as f32),
            score: d.score,
        }));
    }
    Ok(out)
}

pub fn evaluate_model(
    det: &Detector,
    params: &ParamStore,
    ds: &DetectionDataset,
    images: &ImageStore,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let dets = detect_dataset(det, params, ds, images, cfg)?;
    evaluate(&dets, ds, &coco_thresholds(), Some(cfg.seed), &cfg.hash())
}
