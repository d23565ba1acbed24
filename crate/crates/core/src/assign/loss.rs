use serde::{Deserialize, Serialize};

use super::targets::{Cell, TargetMatrix};
use crate::error::{Error, Result};
use crate::geom::{locations, Bbox};
use crate::net::DenseOutputs;
use crate::numeric::{Real, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub gamma: f64,
    pub alpha: f64,
    pub cls: f64,
    pub giou: f64,
    pub quality: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
            cls: 1.0,
            giou: 1.0,
            quality: 1.0,
        }
    }
}

/// Which terms a batch contributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossTermSet {
    #[default]
    AllThree,
    ClassificationOnly,
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Binary focal loss of one logit.
pub fn focal_loss(logit: f64, target: bool, gamma: f64, alpha: f64) -> f64 {
    let (log_pt, log_1m_pt, a) = if target {
        (log_sigmoid(logit), log_sigmoid(-logit), alpha)
    } else {
        (log_sigmoid(-logit), log_sigmoid(logit), 1.0 - alpha)
    };
    -a * (gamma * log_1m_pt).exp() * log_pt
}

/// `1 - gIoU`.
pub fn giou_loss(pred: &Bbox, gt: &Bbox) -> Result<f64> {
    gt.validate("gIoU target")?;
    if !pred.is_finite() || pred.width() < 0.0 || pred.height() < 0.0 {
        return Err(Error::Input(format!(
            "gIoU prediction {pred:?} is inverted"
        )));
    }
    let inter = pred.intersection(gt);
    let union = pred.area() + gt.area() - inter;
    let hull = pred.hull(gt).area();
    Ok(1.0 - (inter / union - (hull - union) / hull))
}

/// Cross-entropy between `sigmoid(logit)` and the IoU of `pred` with `gt`.
pub fn quality_loss(logit: f64, pred: &Bbox, gt: &Bbox) -> Result<f64> {
    gt.validate("quality target")?;
    Ok(soft_bce(logit, pred.iou(gt)))
}

pub fn soft_bce(logit: f64, t: f64) -> f64 {
    -(t * log_sigmoid(logit) + (1.0 - t) * log_sigmoid(-logit))
}

/// Unnormalised focal loss over a logit tensor; `Ignore` cells add nothing.
pub fn focal_loss_sum<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    cells: &[Cell],
    gamma: f64,
    alpha: f64,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if cells.len() != tape.data(logits).len() {
        return Err(Error::Shape(format!(
            "{} target cells for logits {shape:?}",
            cells.len()
        )));
    }
    let weight = |want: Cell, w: f64| {
        cells
            .iter()
            .map(|&c| if c == want { w } else { 0.0 })
            .collect()
    };
    let wp = tape.constant_from(&shape, weight(Cell::Positive, alpha))?;
    let wn = tape.constant_from(&shape, weight(Cell::Negative, 1.0 - alpha))?;
    let log_p = tape.log_sigmoid(logits)?;
    let neg = tape.neg(logits)?;
    let log_q = tape.log_sigmoid(neg)?;
    // (1-p)^gamma = exp(gamma ln(1-p)), p^gamma likewise
    let sq = tape.scale(log_q, gamma)?;
    let mod_p = tape.exp(sq)?;
    let sp = tape.scale(log_p, gamma)?;
    let mod_n = tape.exp(sp)?;
    let tp = tape.mul(mod_p, log_p)?;
    let tn = tape.mul(mod_n, log_q)?;
    let a = tape.mul(tp, wp)?;
    let b = tape.mul(tn, wn)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s)?;
    tape.neg(total)
}

/// Sum of `1 - gIoU` for `[P, 4]` predicted and target distances measured
/// from shared centers. Targets must be positive (center inside the box).
pub fn giou_loss_sum<T: Real>(tape: &mut Tape<T>, pred: Var, target: &[[f32; 4]]) -> Result<Var> {
    let p = target.len();
    if tape.shape(pred) != [p, 4] {
        return Err(Error::Shape(format!(
            "gIoU: pred {:?} vs {p} targets",
            tape.shape(pred)
        )));
    }
    if target.iter().flatten().any(|&d| !(d > 0.0)) {
        return Err(Error::Input(
            "gIoU target distances must be positive".into(),
        ));
    }
    let mut pc = [pred; 4];
    let mut tc = [pred; 4];
    for i in 0..4 {
        pc[i] = tape.select_cols(pred, &[i])?;
        tc[i] = tape.constant_from(&[p, 1], target.iter().map(|t| f64::from(t[i])).collect())?;
    }
    let [pl, pt, pr, pb] = pc;
    let [tl, tt, tr, tb] = tc;
    let extent = |tape: &mut Tape<T>,
                  a: Var,
                  b: Var,
                  c: Var,
                  d: Var,
                  f: fn(&mut Tape<T>, Var, Var) -> Result<Var>|
     -> Result<Var> {
        let x = f(tape, a, b)?;
        let y = f(tape, c, d)?;
        tape.add(x, y)
    };
    let wi = extent(tape, pl, tl, pr, tr, Tape::minimum)?;
    let hi = extent(tape, pt, tt, pb, tb, Tape::minimum)?;
    let inter = tape.mul(wi, hi)?;
    let wp = tape.add(pl, pr)?;
    let hp = tape.add(pt, pb)?;
    let ap = tape.mul(wp, hp)?;
    let ag = tape.constant_from(
        &[p, 1],
        target
            .iter()
            .map(|t| f64::from(t[0] + t[2]) * f64::from(t[1] + t[3]))
            .collect(),
    )?;
    let sum_areas = tape.add(ap, ag)?;
    let union = tape.sub(sum_areas, inter)?;
    let iou = tape.div(inter, union)?;
    let wh = extent(tape, pl, tl, pr, tr, Tape::maximum)?;
    let hh = extent(tape, pt, tt, pb, tb, Tape::maximum)?;
    let hull = tape.mul(wh, hh)?;
    let slack = tape.sub(hull, union)?;
    let penalty = tape.div(slack, hull)?;
    let giou = tape.sub(iou, penalty)?;
    let s = tape.sum(giou)?;
    let neg = tape.neg(s)?;
    tape.offset(neg, p as f64)
}

/// Sum of soft cross-entropies between `sigmoid(logits)` and fixed `targets`.
pub fn quality_loss_sum<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[f64]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if targets.len() != tape.data(logits).len() {
        return Err(Error::Shape(format!(
            "{} quality targets for {shape:?}",
            targets.len()
        )));
    }
    let t = tape.constant_from(&shape, targets.to_vec())?;
    let u = tape.constant_from(&shape, targets.iter().map(|t| 1.0 - t).collect())?;
    let lp = tape.log_sigmoid(logits)?;
    let neg = tape.neg(logits)?;
    let lq = tape.log_sigmoid(neg)?;
    let a = tape.mul(lp, t)?;
    let b = tape.mul(lq, u)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s)?;
    tape.neg(total)
}

#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub total: Var,
    pub focal: f64,
    pub giou: f64,
    pub quality: f64,
    pub num_pos: usize,
}

/// Classification, box and quality losses of one image.
///
/// `embeddings[q]` is the query vector for `targets.queries[q]`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &DenseOutputs,
    targets: &TargetMatrix,
    embeddings: &[&[f32]],
    weights: &LossWeights,
    terms: LossTermSet,
) -> Result<LossValue> {
    let nl = out.num_locations();
    let nq = targets.queries.len();
    if targets.num_locations != nl || embeddings.len() != nq {
        return Err(Error::Shape(format!(
            "targets cover {} locations x {} queries; outputs have {nl} locations and {} embeddings",
            targets.num_locations,
            nq,
            embeddings.len()
        )));
    }
    let (boxes, quality, cls) = out.concat(tape)?;
    let dim = tape.shape(cls)[1];
    let num_pos = targets.positives.len();
    let mut parts = Vec::new();
    let mut value = LossValue {
        total: out.bias,
        focal: 0.0,
        giou: 0.0,
        quality: 0.0,
        num_pos,
    };

    if nq > 0 {
        if let Some(e) = embeddings.iter().find(|e| e.len() != dim) {
            return Err(Error::Shape(format!(
                "query dim {} vs feature dim {dim}",
                e.len()
            )));
        }
        let mut emb = vec![0.0; dim * nq];
        for (q, e) in embeddings.iter().enumerate() {
            for (d, &v) in e.iter().enumerate() {
                emb[d * nq + q] = f64::from(v);
            }
        }
        let e = tape.constant_from(&[dim, nq], emb)?;
        let dots = tape.matmul(cls, e)?;
        let logits = tape.add_scalar(dots, out.bias)?;
        let f = focal_loss_sum(tape, logits, targets.cells(), weights.gamma, weights.alpha)?;
        let f = tape.scale(f, weights.cls / num_pos.max(1) as f64)?;
        value.focal = tape.item(f);
        parts.push(f);
    }

    if num_pos > 0 && terms == LossTermSet::AllThree {
        let locs = locations(&out.grids());
        let rows: Vec<usize> = targets.positives.iter().map(|p| p.0).collect();
        let enc: Vec<[f32; 4]> = targets
            .positives
            .iter()
            .map(|(l, b)| locs[*l].encode(b))
            .collect();
        let pred = tape.gather_rows(boxes, &rows)?;
        let g = giou_loss_sum(tape, pred, &enc)?;
        let g = tape.scale(g, weights.giou / num_pos as f64)?;
        value.giou = tape.item(g);
        parts.push(g);

        // IoU targets are read off the current prediction and held fixed.
        let pd = tape.data(pred);
        let ious: Vec<f64> = targets
            .positives
            .iter()
            .enumerate()
            .map(|(i, (l, b))| {
                let d = [0, 1, 2, 3].map(|k| pd[i * 4 + k].as_f32());
                locs[*l].decode(d).iou(b)
            })
            .collect();
        let q = tape.gather_rows(quality, &rows)?;
        let ql = quality_loss_sum(tape, q, &ious)?;
        let ql = tape.scale(ql, weights.quality / num_pos as f64)?;
        value.quality = tape.item(ql);
        parts.push(ql);
    }

    value.total = match parts.split_first() {
        None => {
            // keep the result on the graph so backward still sees the bias
            tape.scale(out.bias, 0.0)?
        }
        Some((&first, rest)) => {
            let mut acc = first;
            for &p in rest {
                acc = tape.add(acc, p)?;
            }
            acc
        }
    };
    Ok(value)
}
