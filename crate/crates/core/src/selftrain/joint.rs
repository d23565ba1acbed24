//! Joint supervised + pseudo-labelled training.

use std::collections::BTreeSet;

use image::imageops::{resize, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PseudoLabel;
use crate::assign::{sample_pseudo_negatives, GroundTruth, TargetMode};
use crate::data::{image_tensor, ImageStore};
use crate::error::{Error, Result};
use crate::geom::Bbox;
use crate::net::Detector;
use crate::numeric::ParamStore;
use crate::text::{render_templates, EmbeddingBank, TemplateList};
use crate::train::{
    image_gradients, lr_at, steps_per_epoch, supervised_batch, AdamW, EpochLog, GradAccum,
    ImageObjective, LossTotals, Prepared, TrainConfig,
};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JointLoss {
    pub supervised: LossTotals,
    pub pseudo: LossTotals,
}

/// Resizes a corpus image by `scale` and attaches its pseudo box. Returns
/// `None` when the box degenerates at that size.
pub fn pseudo_sample(
    img: &RgbImage,
    label: &PseudoLabel,
    scale: f64,
    divisor: usize,
) -> Option<Prepared> {
    let (w, h) = (img.width(), img.height());
    let nw = ((f64::from(w) * scale).round() as u32).max(1);
    let nh = ((f64::from(h) * scale).round() as u32).max(1);
    let sx = nw as f32 / w as f32;
    let sy = nh as f32 / h as f32;
    let b = label.bbox;
    let bbox = Bbox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy).clip(nw as f32, nh as f32);
    if !bbox.is_valid() {
        return None;
    }
    let small = if (nw, nh) == (w, h) {
        img.clone()
    } else {
        resize(img, nw, nh, FilterType::Triangle)
    };
    Some(Prepared {
        id: label.image_id,
        image: image_tensor(&small, divisor),
        width: nw as f32,
        height: nh as f32,
        gts: vec![GroundTruth {
            bbox,
            query: label.caption.clone(),
        }],
    })
}

/// Adds the mean-over-batch pseudo gradients to `acc`. Every distinct
/// caption of the batch is in play for every image; `negatives` is the
/// optional vocabulary of extra pseudo-negatives.
#[allow(clippy::too_many_arguments)]
pub fn pseudo_batch(
    det: &Detector,
    params: &ParamStore,
    batch: &[&Prepared],
    negatives: Option<&[String]>,
    bank: &EmbeddingBank,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    acc: &mut GradAccum,
) -> Result<LossTotals> {
    let mut captions: Vec<String> = Vec::new();
    for s in batch {
        for g in &s.gts {
            if !captions.contains(&g.query) {
                captions.push(g.query.clone());
            }
        }
    }
    let mode = if cfg.selftrain.batch_negatives {
        TargetMode::BatchNegatives
    } else {
        TargetMode::NoBatchNegatives
    };
    let mut totals = LossTotals::default();
    let scale = 1.0 / batch.len().max(1) as f32;
    for s in batch {
        let mut in_play = captions.clone();
        if let Some(vocab) = negatives {
            let extra = sample_pseudo_negatives(&in_play, vocab, cfg.pseudo_negatives, rng);
            in_play.extend(extra);
        }
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
            mode,
            terms: cfg.selftrain.terms(),
        };
        let (t, g) = image_gradients(det, params, &obj, cfg)?;
        acc.add_scaled(&g, scale);
        totals.merge(&t);
    }
    Ok(totals)
}

/// One optimizer update on the sum of the supervised and pseudo batch
/// losses. An empty pseudo batch gives a plain supervised step.
#[allow(clippy::too_many_arguments)]
pub fn joint_step(
    det: &Detector,
    params: &mut ParamStore,
    opt: &mut AdamW,
    supervised: &[&Prepared],
    pseudo: &[&Prepared],
    vocab: &[String],
    pseudo_negatives: Option<&[String]>,
    bank: &EmbeddingBank,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    lr: f64,
) -> Result<JointLoss> {
    let mut acc = GradAccum::zeros(params);
    let mut loss = JointLoss {
        supervised: supervised_batch(det, params, supervised, vocab, bank, cfg, rng, &mut acc)?,
        ..JointLoss::default()
    };
    if !pseudo.is_empty() {
        loss.pseudo = pseudo_batch(
            det,
            params,
            pseudo,
            pseudo_negatives,
            bank,
            cfg,
            rng,
            &mut acc,
        )?;
    }
    opt.step(params, &acc.sums, lr)?;
    Ok(loss)
}

/// Continues training a copy of `teacher` on supervised data plus the
/// pseudo-labelled corpus, restarting the learning-rate schedule.
/// `bank` must hold the class queries of `vocab`; caption embeddings are
/// built here.
#[allow(clippy::too_many_arguments)]
pub fn run_self_training(
    det: &Detector,
    teacher: &ParamStore,
    data: &[Prepared],
    vocab: &[String],
    bank: &EmbeddingBank,
    labels: &[PseudoLabel],
    corpus_images: &ImageStore,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<(ParamStore, Vec<EpochLog>)> {
    cfg.selftrain.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no supervised training images".into()));
    }
    for l in labels {
        if !corpus_images.contains_key(&l.image_id) {
            return Err(Error::Data(format!(
                "pseudo-label for image {} not in the corpus",
                l.image_id
            )));
        }
        if l.caption.trim().is_empty() {
            return Err(Error::Data(format!(
                "pseudo-label for image {} has an empty caption",
                l.image_id
            )));
        }
        l.bbox.validate("pseudo-label")?;
    }
    let captions: Vec<String> = labels
        .iter()
        .map(|l| l.caption.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut full_bank = bank.clone();
    let caption_bank =
        EmbeddingBank::for_texts(&captions, bank.dim(), bank.k(), cfg.dropout_rate, cfg.seed)?;
    full_bank.merge(&caption_bank)?;

    // a class whose query text equals a caption would be its own negative
    let negatives: Option<Vec<String>> = if cfg.selftrain.pseudo_negatives_in_pseudo_batches {
        let templates = TemplateList::default();
        let mut keep = Vec::new();
        for v in vocab {
            let text = render_templates(v, &templates)?.remove(0);
            if captions
                .binary_search_by(|c| c.as_str().cmp(text.raw()))
                .is_err()
            {
                keep.push(v.clone());
            }
        }
        Some(keep)
    } else {
        None
    };

    let epochs = cfg.selftrain.epochs.unwrap_or(cfg.epochs);
    let mut sched = cfg.clone();
    if epochs > 0 {
        sched.epochs = epochs;
    }
    let divisor = det.config().size_divisor();
    let [lo, hi] = cfg.selftrain.jitter;
    let mut student = teacher.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut opt = cfg.optimizer();
    let per_epoch = steps_per_epoch(data.len(), cfg.batch_size);
    let total = per_epoch * epochs;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut pseudo_order: Vec<usize> = (0..labels.len()).collect();
    let mut cursor = pseudo_order.len();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut totals = LossTotals::default();
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let sup: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let mut pseudo = Vec::new();
            for _ in 0..cfg.pseudo_batch_size.min(labels.len()) {
                if cursor == pseudo_order.len() {
                    pseudo_order.shuffle(&mut rng);
                    cursor = 0;
                }
                let label = &labels[pseudo_order[cursor]];
                cursor += 1;
                let scale = cfg.selftrain.pseudo_resolution_scale * rng.random_range(lo..=hi);
                if let Some(s) =
                    pseudo_sample(&corpus_images[&label.image_id], label, scale, divisor)
                {
                    pseudo.push(s);
                }
            }
            let pseudo_refs: Vec<&Prepared> = pseudo.iter().collect();
            lr = lr_at(step, total, cfg.base_lr, &sched);
            let loss = joint_step(
                det,
                &mut student,
                &mut opt,
                &sup,
                &pseudo_refs,
                vocab,
                negatives.as_deref(),
                &full_bank,
                cfg,
                &mut rng,
                lr,
            )?;
            totals.merge(&loss.supervised);
            totals.merge(&loss.pseudo);
            step += 1;
        }
        let entry = EpochLog {
            stage: "selftrain".into(),
            epoch,
            steps: step,
            lr,
            loss: totals.mean(),
        };
        log(&entry);
        history.push(entry);
    }
    Ok((student, history))
}
