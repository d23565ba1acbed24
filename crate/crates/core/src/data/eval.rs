//! COCO-style box mAP with frequency-group breakdowns.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::dataset::{DetectionDataset, FrequencyGroup};
use crate::error::{Error, Result};
use crate::geom::Bbox;
use crate::infer::DetectionRecord;

/// `0.50, 0.55, ..., 0.95`
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP_all")]
    pub map_all: f64,
    /// `None` when no category of the group has ground truth.
    #[serde(rename = "mAP_rare")]
    pub map_rare: Option<f64>,
    #[serde(rename = "mAP_common")]
    pub map_common: Option<f64>,
    #[serde(rename = "mAP_frequent")]
    pub map_frequent: Option<f64>,
    /// AP per category name; categories without ground truth are absent.
    pub per_category: BTreeMap<String, f64>,
    pub seed: Option<u64>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let mut m = vec![("mAP_all", self.map_all)];
        for (k, v) in [
            ("mAP_rare", self.map_rare),
            ("mAP_common", self.map_common),
            ("mAP_frequent", self.map_frequent),
        ] {
            if let Some(v) = v {
                m.push((k, v));
            }
        }
        m
    }
}

/// Precision-recall AP for one category at one IoU threshold.
///
/// `dets` must already be in ranking order; `gts` maps image id to boxes.
pub fn average_precision(
    dets: &[(u64, Bbox)],
    gts: &HashMap<u64, Vec<Bbox>>,
    iou_threshold: f64,
) -> f64 {
    let n_gt: usize = gts.values().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut used: HashMap<u64, Vec<bool>> = gts
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for (i, (img, b)) in dets.iter().enumerate() {
        if let (Some(g), Some(u)) = (gts.get(img), used.get_mut(img)) {
            let mut best: Option<(usize, f64)> = None;
            for (j, gb) in g.iter().enumerate() {
                if u[j] {
                    continue;
                }
                let iou = b.iou(gb);
                if iou >= iou_threshold && best.is_none_or(|(_, bi)| iou > bi) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                u[j] = true;
                tp += 1;
            }
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let idx = recall.partition_point(|x| *x < r - 1e-12);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

fn rank(a: &DetectionRecord, b: &DetectionRecord) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image_id.cmp(&b.image_id))
        .then_with(|| {
            let (x, y) = (a.bbox, b.bbox);
            [x.x1, x.y1, x.x2, x.y2]
                .iter()
                .zip([y.x1, y.y1, y.x2, y.y2].iter())
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Some(s.iter().sum::<f64>() / s.len() as f64)
}

/// Scores `dets` against `ds`. Detection queries are category names.
pub fn evaluate(
    dets: &[DetectionRecord],
    ds: &DetectionDataset,
    iou_thresholds: &[f64],
    seed: Option<u64>,
    config_hash: &str,
) -> Result<EvalReport> {
    if iou_thresholds.is_empty() {
        return Err(Error::Input("no IoU thresholds".into()));
    }
    let by_name: HashMap<&str, u64> = ds
        .categories
        .iter()
        .map(|c| (c.name.as_str(), c.id))
        .collect();
    let images: std::collections::HashSet<u64> = ds.images.iter().map(|i| i.id).collect();
    let mut per_cat_dets: HashMap<u64, Vec<&DetectionRecord>> = HashMap::new();
    for d in dets {
        if !images.contains(&d.image_id) {
            return Err(Error::Input(format!(
                "detection references unknown image {}",
                d.image_id
            )));
        }
        let cat = by_name
            .get(d.query.as_str())
            .ok_or_else(|| Error::UnknownQuery(d.query.clone()))?;
        per_cat_dets.entry(*cat).or_default().push(d);
    }
    let mut per_cat_gts: HashMap<u64, HashMap<u64, Vec<Bbox>>> = HashMap::new();
    for a in &ds.annotations {
        per_cat_gts
            .entry(a.category_id)
            .or_default()
            .entry(a.image_id)
            .or_default()
            .push(a.bbox());
    }

    let mut per_category = BTreeMap::new();
    let mut groups: BTreeMap<FrequencyGroup, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for c in &ds.categories {
        let Some(gts) = per_cat_gts.get(&c.id) else {
            continue;
        };
        let mut cd = per_cat_dets.remove(&c.id).unwrap_or_default();
        cd.sort_by(|a, b| rank(a, b));
        let ranked: Vec<(u64, Bbox)> = cd.iter().map(|d| (d.image_id, d.bbox)).collect();
        let ap = iou_thresholds
            .iter()
            .map(|t| average_precision(&ranked, gts, *t))
            .sum::<f64>()
            / iou_thresholds.len() as f64;
        per_category.insert(c.name.clone(), ap);
        groups.entry(c.frequency_group).or_default().push(ap);
        all.push(ap);
    }
    let group = |g| groups.get(&g).and_then(|v| mean(v));
    Ok(EvalReport {
        map_all: mean(&all).unwrap_or(0.0),
        map_rare: group(FrequencyGroup::Rare),
        map_common: group(FrequencyGroup::Common),
        map_frequent: group(FrequencyGroup::Frequent),
        per_category,
        seed,
        config_hash: config_hash.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: usize,
    pub config_hash: String,
    pub metrics: BTreeMap<String, MeanStd>,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    let mean = mean(values).ok_or_else(|| Error::Input("no values to aggregate".into()))?;
    if values.len() < 2 {
        return Ok(MeanStd { mean, std: 0.0 });
    }
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    sq.sort_by(f64::total_cmp);
    let var = sq.iter().sum::<f64>() / (values.len() - 1) as f64;
    Ok(MeanStd {
        mean,
        std: var.sqrt(),
    })
}

/// Mean and sample standard deviation of every metric present in all reports.
pub fn aggregate_seeds(reports: &[EvalReport]) -> Result<SeedSummary> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Input("no reports to aggregate".into()))?;
    if let Some(r) = reports.iter().find(|r| r.config_hash != first.config_hash) {
        return Err(Error::Input(format!(
            "mixed config hashes: {} vs {}",
            first.config_hash, r.config_hash
        )));
    }
    let mut metrics = BTreeMap::new();
    for (name, _) in first.metrics() {
        let vals: Vec<f64> = reports
            .iter()
            .filter_map(|r| {
                r.metrics()
                    .into_iter()
                    .find(|(n, _)| *n == name)
                    .map(|m| m.1)
            })
            .collect();
        if vals.len() == reports.len() {
            metrics.insert(name.to_string(), mean_std(&vals)?);
        }
    }
    Ok(SeedSummary {
        runs: reports.len(),
        config_hash: first.config_hash.clone(),
        metrics,
    })
}
