//! Offline pseudo-labelling of the caption corpus with a frozen teacher.

use serde::{Deserialize, Serialize};

use super::{SelfTrainConfig, SelfTrainMethod};
use crate::data::{image_tensor, CaptionRecord, ImageStore};
use crate::error::{Error, Result};
use crate::geom::{locations, Bbox};
use crate::infer::{run_dense, DenseValues};
use crate::net::Detector;
use crate::numeric::{sigmoid, ParamStore};
use crate::text::EmbeddingBank;

/// One line of the pseudo-label file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabel {
    pub image_id: u64,
    /// The caption doubles as the query id of its embedding.
    pub caption: String,
    #[serde(rename = "box")]
    pub bbox: Bbox,
    pub score: f32,
    pub method: SelfTrainMethod,
}

/// Highest-scoring location for `query`, kept only if its score reaches
/// `confidence`. Ties go to the lower location index.
pub fn select_threeway(
    values: &DenseValues,
    query: &[f32],
    confidence: f32,
    width: f32,
    height: f32,
) -> Result<Option<(Bbox, f32)>> {
    if query.len() != values.dim {
        return Err(Error::Shape(format!(
            "query dim {} vs feature dim {}",
            query.len(),
            values.dim
        )));
    }
    let mut best: Option<(usize, f32)> = None;
    for loc in 0..values.num_locations() {
        let s = sigmoid(values.logit(loc, query)) * sigmoid(values.quality[loc]);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((loc, s));
        }
    }
    let Some((loc, score)) = best.filter(|&(_, s)| s >= confidence) else {
        return Ok(None);
    };
    let locs = locations(&values.grids);
    Ok(Some((
        locs[loc].decode(values.ltrb(loc)).clip(width, height),
        score,
    )))
}

/// Largest decoded box among locations whose predicted quality reaches
/// `threshold`; the score is that quality.
pub fn select_detic(
    values: &DenseValues,
    threshold: f32,
    width: f32,
    height: f32,
) -> Option<(Bbox, f32)> {
    let locs = locations(&values.grids);
    let mut best: Option<(Bbox, f32, f64)> = None;
    for (loc, l) in locs.iter().enumerate() {
        let q = sigmoid(values.quality[loc]);
        if q < threshold {
            continue;
        }
        let b = l.decode(values.ltrb(loc)).clip(width, height);
        let area = b.area();
        if best.is_none_or(|(_, _, a)| area > a) {
            best = Some((b, q, area));
        }
    }
    best.map(|(b, q, _)| (b, q))
}

/// Labels every corpus entry; entries the method rejects are dropped.
pub fn pseudo_label(
    det: &Detector,
    teacher: &ParamStore,
    corpus: &[CaptionRecord],
    images: &ImageStore,
    bank: &EmbeddingBank,
    cfg: &SelfTrainConfig,
) -> Result<Vec<PseudoLabel>> {
    cfg.validate()?;
    let divisor = det.config().size_divisor();
    let mut out = Vec::new();
    for rec in corpus {
        if rec.caption.trim().is_empty() {
            return Err(Error::Data(format!(
                "image {} has an empty caption",
                rec.image_id
            )));
        }
        let px = images.get(&rec.image_id).ok_or_else(|| {
            Error::Data(format!("caption references missing image {}", rec.image_id))
        })?;
        let (w, h) = (px.width() as f32, px.height() as f32);
        let picked = match cfg.method {
            SelfTrainMethod::ImageBbox => Some((Bbox::new(0.0, 0.0, w, h), 1.0)),
            SelfTrainMethod::Threeway => {
                let values = run_dense(det, teacher, &image_tensor(px, divisor))?;
                select_threeway(&values, bank.base(&rec.caption)?, cfg.confidence, w, h)?
            }
            SelfTrainMethod::DeticDagger => {
                let values = run_dense(det, teacher, &image_tensor(px, divisor))?;
                select_detic(&values, cfg.detic_quality_threshold, w, h)
            }
        };
        if let Some((bbox, score)) = picked.filter(|(b, _)| b.is_valid()) {
            out.push(PseudoLabel {
                image_id: rec.image_id,
                caption: rec.caption.clone(),
                bbox,
                score,
                method: cfg.method,
            });
        }
    }
    Ok(out)
}
