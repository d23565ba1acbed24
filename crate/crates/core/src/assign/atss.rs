use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Bbox, Location};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtssConfig {
    /// Candidates per level per ground truth.
    pub k: usize,
    /// Anchor side in units of the level stride.
    pub anchor_scale: f32,
}

impl Default for AtssConfig {
    fn default() -> Self {
        Self {
            k: 9,
            anchor_scale: 4.0,
        }
    }
}

/// Per-location ground-truth index (`None` is negative).
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub gt_of: Vec<Option<usize>>,
}

impl Assignment {
    pub fn all_negative(n: usize) -> Self {
        Self {
            gt_of: vec![None; n],
        }
    }

    pub fn num_locations(&self) -> usize {
        self.gt_of.len()
    }

    /// `(location, gt)` pairs in location order.
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.gt_of
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (i, g)))
    }

    pub fn num_positives(&self) -> usize {
        self.gt_of.iter().filter(|g| g.is_some()).count()
    }
}

/// Square anchor of side `scale * stride` centered on the location.
pub fn anchor_box(loc: &Location, scale: f32) -> Bbox {
    let half = scale * loc.stride as f32 / 2.0;
    Bbox::new(loc.cx - half, loc.cy - half, loc.cx + half, loc.cy + half)
}

fn center_dist2(loc: &Location, gt: &Bbox) -> f64 {
    let (gx, gy) = gt.center();
    let dx = f64::from(loc.cx) - f64::from(gx);
    let dy = f64::from(loc.cy) - f64::from(gy);
    dx * dx + dy * dy
}

/// Mean plus (n-1)-denominator standard deviation; the deviation is 0 for n = 1.
pub fn mean_plus_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return mean;
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    mean + var.sqrt()
}

pub fn atss_assign(locs: &[Location], gts: &[Bbox], cfg: &AtssConfig) -> Result<Assignment> {
    if locs.is_empty() {
        return Err(Error::Input("ATSS needs at least one location".into()));
    }
    if cfg.k == 0 {
        return Err(Error::Config("ATSS k must be at least 1".into()));
    }
    for (i, g) in gts.iter().enumerate() {
        g.validate(&format!("ground truth {i}"))?;
    }
    let num_levels = locs.iter().map(|l| l.level).max().unwrap_or(0) + 1;
    let mut by_level = vec![Vec::new(); num_levels];
    for (i, l) in locs.iter().enumerate() {
        by_level[l.level].push(i);
    }

    let mut best: Vec<Option<(usize, f64)>> = vec![None; locs.len()];
    for (gi, gt) in gts.iter().enumerate() {
        let mut cands = Vec::new();
        for idx in &by_level {
            let mut ranked: Vec<(f64, usize)> = idx
                .iter()
                .map(|&i| (center_dist2(&locs[i], gt), i))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cands.extend(ranked.into_iter().take(cfg.k).map(|(_, i)| i));
        }
        if cands.is_empty() {
            continue;
        }
        let ious: Vec<f64> = cands
            .iter()
            .map(|&i| anchor_box(&locs[i], cfg.anchor_scale).iou(gt))
            .collect();
        let thr = mean_plus_std(&ious);
        for (&i, &iou) in cands.iter().zip(&ious) {
            if iou >= thr && gt.contains_strict(locs[i].cx, locs[i].cy) {
                // strict > keeps the lowest gt index on equal IoU
                if best[i].is_none_or(|(_, b)| iou > b) {
                    best[i] = Some((gi, iou));
                }
            }
        }
    }
    Ok(Assignment {
        gt_of: best.into_iter().map(|b| b.map(|(g, _)| g)).collect(),
    })
}
