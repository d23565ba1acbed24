//! Image-caption pretraining of the backbone.
//!
//! Each location of the last backbone map is scored against every distinct
//! caption through the fixed reduce/expand projections the aligned wiring
//! starts from. Location scores are pooled per caption with log-mean-exp,
//! shifted by the detector's prior bias and trained with a per-caption
//! sigmoid cross-entropy. The shift puts pooled scores on the scale the
//! detector's classification logits start from. A soft cap on the logits keeps
//! the loss from rewarding ever larger feature norms.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::optim::{lr_at, AdamW};
use super::trainer::{steps_per_epoch, EpochLog, GradAccum, LossTotals};
use crate::assign::quality_loss_sum;
use crate::data::{image_tensor, CaptionRecord, ImageStore};
use crate::error::{Error, Result};
use crate::net::{prior_bias, Detector, Projection};
use crate::numeric::{ParamStore, Real, Tape, Tensor, Var};
use crate::text::EmbeddingBank;

/// `[C, Q]` matrix mapping backbone channels straight to caption scores.
fn caption_matrix(det: &Detector, captions: &[String], bank: &EmbeddingBank) -> Result<Tensor> {
    let cfg = det.config();
    let reduce = Projection::reduce(cfg.final_dim(), cfg.fpn.dim)?;
    let expand = Projection::expand(cfg.fpn.dim, cfg.cls_dim)?;
    let c = cfg.final_dim();
    let q = captions.len();
    let mut m = vec![0.0f32; c * q];
    for ch in 0..c {
        let mut unit = vec![0.0f32; c];
        unit[ch] = 1.0;
        let col = expand.apply(&reduce.apply(&unit)?)?;
        for (j, cap) in captions.iter().enumerate() {
            let e = bank.base(cap)?;
            m[ch * q + j] = col.iter().zip(e).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::new([c, q], m)
}

/// Log-sum-exp down the rows of an `[L, Q]` matrix, shifted per column so
/// every column sum is at least 1.
fn logsumexp_rows<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (l, q) = (tape.shape(x)[0], tape.shape(x)[1]);
    let data = tape.data(x);
    let m: Vec<f64> = (0..q)
        .map(|j| (0..l).fold(f64::NEG_INFINITY, |a, i| a.max(data[i * q + j].as_f64())))
        .collect();
    let neg = tape.constant_from(&[q], m.iter().map(|v| -v).collect())?;
    let shifted = tape.add_bias(x, neg, 1)?;
    let e = tape.exp(shifted)?;
    let s = tape.sum_axis(e, 0)?;
    let lse = tape.ln(s)?;
    let back = tape.constant_from(&[q], m)?;
    tape.add_bias(lse, back, 0)
}

/// Summed sigmoid cross-entropy of one image against the caption set;
/// `target` indexes the positive column of `matrix`. Logits are soft-capped
/// at `±cap`.
pub fn pretrain_loss<T: Real>(
    det: &Detector,
    tape: &mut Tape<T>,
    params: &crate::numeric::Bound,
    image: &Tensor,
    matrix: &Tensor,
    target: usize,
    cap: f64,
) -> Result<Var> {
    let x = det.input(tape, image)?;
    let feats = det.backbone(tape, params, x)?;
    let top = *feats
        .last()
        .ok_or_else(|| Error::Config("backbone has no stages".into()))?;
    let s = tape.shape(top).to_vec();
    let flat = tape.reshape(top, &[s[1], s[2] * s[3]])?;
    let rows = tape.transpose(flat)?;
    let m = tape.constant(matrix)?;
    let scores = tape.matmul(rows, m)?;
    let locs = tape.shape(scores)[0];
    let pooled = logsumexp_rows(tape, scores)?;
    let shift = prior_bias(det.config().bias.prior_p) - (locs as f64).ln();
    let logits = tape.offset(pooled, shift)?;
    let squashed = tape.scale(logits, 1.0 / cap)?;
    let squashed = tape.tanh(squashed)?;
    let logits = tape.scale(squashed, cap)?;
    let targets: Vec<f64> = (0..matrix.shape()[1])
        .map(|j| f64::from(u8::from(j == target)))
        .collect();
    quality_loss_sum(tape, logits, &targets)
}

/// Trains only the backbone of a fresh parameter set; the result holds the
/// full set so it can be loaded as a checkpoint.
pub fn pretrain_backbone(
    det: &Detector,
    captions: &[CaptionRecord],
    images: &ImageStore,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<(ParamStore, Vec<EpochLog>)> {
    if captions.is_empty() {
        return Err(Error::Data(
            "pretraining needs a non-empty caption corpus".into(),
        ));
    }
    let mut texts: Vec<String> = captions.iter().map(|c| c.caption.clone()).collect();
    texts.sort();
    texts.dedup();
    let bank = EmbeddingBank::for_texts(&texts, det.config().cls_dim, 1, 0.0, 0)?;
    let matrix = caption_matrix(det, &texts, &bank)?;
    let divisor = det.config().size_divisor();
    let samples = captions
        .iter()
        .map(|c| {
            let px = images.get(&c.image_id).ok_or_else(|| {
                Error::Data(format!("caption references missing image {}", c.image_id))
            })?;
            let target = texts.binary_search(&c.caption).expect("caption listed");
            Ok((image_tensor(px, divisor), target))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut params = det.init_params(cfg.seed)?;
    let trainable: Vec<bool> = params
        .names()
        .iter()
        .map(|n| n.starts_with("backbone."))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let pc = &cfg.pretrain;
    let mut opt = AdamW::new(cfg.weight_decay, cfg.clip);
    let per_epoch = steps_per_epoch(samples.len(), pc.batch_size);
    let total = per_epoch * pc.epochs;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..pc.epochs {
        order.shuffle(&mut rng);
        let mut totals = LossTotals::default();
        let mut lr = 0.0;
        for chunk in order.chunks(pc.batch_size) {
            let mut acc = GradAccum::zeros(&params);
            for &i in chunk {
                let (img, target) = &samples[i];
                let mut tape = Tape::<f32>::new();
                let bound = params.bind(&mut tape)?;
                let loss =
                    pretrain_loss(det, &mut tape, &bound, img, &matrix, *target, pc.logit_cap)?;
                let value = tape.item(loss);
                let g = tape.backward(loss)?;
                let mut grads = bound.collect_grads(&tape, &g);
                for (gr, keep) in grads.iter_mut().zip(&trainable) {
                    if !keep {
                        gr.data_mut().fill(0.0);
                    }
                }
                acc.add_scaled(&grads, 1.0 / chunk.len() as f32);
                totals.total += value;
                totals.focal += value;
                totals.images += 1;
            }
            lr = lr_at(step, total, pc.base_lr, cfg);
            let frozen: Vec<Tensor> = params.tensors().to_vec();
            opt.step(&mut params, &acc.sums, lr)?;
            // weight decay must not touch the frozen part either
            for ((t, f), keep) in params.tensors_mut().iter_mut().zip(frozen).zip(&trainable) {
                if !keep {
                    *t = f;
                }
            }
            step += 1;
        }
        let entry = EpochLog {
            stage: "pretrain".into(),
            epoch,
            steps: step,
            lr,
            loss: totals.mean(),
        };
        log(&entry);
        history.push(entry);
    }
    Ok((params, history))
}
