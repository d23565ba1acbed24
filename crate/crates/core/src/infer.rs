//! Decoding dense outputs into scored boxes and non-maximum suppression.

use std::cmp::Ordering;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{locations, Bbox, LevelGrid};
use crate::net::{DenseOutputs, Detector};
use crate::numeric::{sigmoid, ParamStore, Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub score_floor: f32,
    /// Candidates kept per level and query before suppression.
    pub top_n: usize,
    pub nms_iou: f64,
    pub per_query: bool,
    /// Final cap per image.
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_floor: 0.05,
            top_n: 200,
            nms_iou: 0.6,
            per_query: true,
            max_detections: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Bbox,
    pub score: f32,
    pub query: String,
    pub level: usize,
}

/// A decoded detection with its dense index `location * num_queries + query`,
/// used to break score ties.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub det: Detection,
    pub index: usize,
}

/// Plain-value copy of [`DenseOutputs`].
#[derive(Clone, Debug, PartialEq)]
pub struct DenseValues {
    pub grids: Vec<LevelGrid>,
    /// `[L, 4]`, levels concatenated.
    pub boxes: Vec<f32>,
    /// `[L]`
    pub quality: Vec<f32>,
    /// `[L, D]`
    pub cls: Vec<f32>,
    pub dim: usize,
    pub bias: f32,
}

impl DenseValues {
    pub fn from_tape<T: Real>(tape: &Tape<T>, out: &DenseOutputs) -> Self {
        let mut v = Self {
            grids: out.grids(),
            boxes: Vec::new(),
            quality: Vec::new(),
            cls: Vec::new(),
            dim: out.levels.first().map_or(0, |l| tape.shape(l.cls_feat)[1]),
            bias: tape.item(out.bias) as f32,
        };
        for l in &out.levels {
            v.boxes
                .extend(tape.data(l.boxes).iter().map(|x| x.as_f32()));
            v.quality
                .extend(tape.data(l.quality).iter().map(|x| x.as_f32()));
            v.cls
                .extend(tape.data(l.cls_feat).iter().map(|x| x.as_f32()));
        }
        v
    }

    pub fn num_locations(&self) -> usize {
        self.quality.len()
    }

    pub fn logit(&self, loc: usize, query: &[f32]) -> f32 {
        let f = &self.cls[loc * self.dim..(loc + 1) * self.dim];
        f.iter().zip(query).map(|(a, b)| a * b).sum::<f32>() + self.bias
    }

    pub fn ltrb(&self, loc: usize) -> [f32; 4] {
        [0, 1, 2, 3].map(|k| self.boxes[loc * 4 + k])
    }
}

/// Runs the network on one `[3, H, W]` image and returns the dense values.
pub fn run_dense(det: &Detector, params: &ParamStore, image: &Tensor) -> Result<DenseValues> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape)?;
    let out = det.forward(&mut tape, &bound, image)?;
    Ok(DenseValues::from_tape(&tape, &out))
}

fn by_score(a: &Candidate, b: &Candidate) -> Ordering {
    b.det
        .score
        .total_cmp(&a.det.score)
        .then(a.index.cmp(&b.index))
}

/// Scores every (location, query) pair, drops those under the floor and keeps
/// the best `top_n` per level and query. Boxes are clipped to `(width, height)`.
pub fn decode(
    values: &DenseValues,
    queries: &[(String, Vec<f32>)],
    cfg: &InferenceConfig,
    width: f32,
    height: f32,
) -> Result<Vec<Candidate>> {
    if let Some((q, _)) = queries.iter().find(|(_, e)| e.len() != values.dim) {
        return Err(Error::Shape(format!(
            "query `{q}` dim differs from feature dim {}",
            values.dim
        )));
    }
    let locs = locations(&values.grids);
    let nq = queries.len();
    let mut out = Vec::new();
    let mut start = 0;
    for (level, g) in values.grids.iter().enumerate() {
        let end = start + g.h * g.w;
        for (qi, (id, e)) in queries.iter().enumerate() {
            let mut level_cands = Vec::new();
            for (loc, anchor) in locs.iter().enumerate().take(end).skip(start) {
                let score = sigmoid(values.logit(loc, e)) * sigmoid(values.quality[loc]);
                if score < cfg.score_floor {
                    continue;
                }
                level_cands.push(Candidate {
                    det: Detection {
                        bbox: anchor.decode(values.ltrb(loc)).clip(width, height),
                        score,
                        query: id.clone(),
                        level,
                    },
                    index: loc * nq + qi,
                });
            }
            level_cands.sort_by(by_score);
            level_cands.truncate(cfg.top_n);
            out.extend(level_cands);
        }
        start = end;
    }
    Ok(out)
}

/// Greedy suppression in (score desc, index asc) order.
pub fn nms(mut cands: Vec<Candidate>, iou_threshold: f64, per_query: bool) -> Vec<Candidate> {
    cands.sort_by(by_score);
    let mut kept: Vec<Candidate> = Vec::new();
    for c in cands {
        let suppressed = kept.iter().any(|k| {
            (!per_query || k.det.query == c.det.query)
                && k.det.bbox.iou(&c.det.bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(c);
        }
    }
    kept
}

/// Full detection pipeline for one image.
pub fn detect(
    det: &Detector,
    params: &ParamStore,
    image: &Tensor,
    queries: &[(String, Vec<f32>)],
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    let values = run_dense(det, params, image)?;
    let (h, w) = (image.shape()[1] as f32, image.shape()[2] as f32);
    let cands = decode(&values, queries, cfg, w, h)?;
    let mut kept = nms(cands, cfg.nms_iou, cfg.per_query);
    kept.truncate(cfg.max_detections);
    Ok(kept.into_iter().map(|c| c.det).collect())
}

/// One line of a detection dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub query: String,
    #[serde(rename = "box")]
    pub bbox: Bbox,
    pub score: f32,
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, rows: &[T]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(r: impl BufRead, what: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{what} line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn save_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, rows)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(logit_feat: f32, quality: f32) -> DenseValues {
        DenseValues {
            grids: vec![LevelGrid {
                stride: 4,
                h: 4,
                w: 4,
            }],
            boxes: vec![4.0; 64],
            quality: vec![quality; 16],
            cls: vec![logit_feat; 16],
            dim: 1,
            bias: 0.0,
        }
    }

    fn cand(b: [f32; 4], score: f32, q: &str, index: usize) -> Candidate {
        Candidate {
            det: Detection {
                bbox: b.into(),
                score,
                query: q.into(),
                level: 0,
            },
            index,
        }
    }

    #[test]
    fn confident_negatives_give_nothing() {
        let q = vec![("a".to_string(), vec![1.0])];
        let c = decode(
            &values(-1e4, 5.0),
            &q,
            &InferenceConfig::default(),
            16.0,
            16.0,
        )
        .unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn decode_arithmetic() {
        let q = vec![("a".to_string(), vec![1.0])];
        let c = decode(
            &values(5.0, 5.0),
            &q,
            &InferenceConfig::default(),
            64.0,
            64.0,
        )
        .unwrap();
        let at = c.iter().find(|c| c.index == 2 * 4 + 2).unwrap();
        assert_eq!(at.det.bbox, Bbox::new(6.0, 6.0, 14.0, 14.0));
        let s = 1.0 / (1.0 + (-5.0f32).exp());
        assert!((at.det.score - s * s).abs() < 1e-6);
    }

    #[test]
    fn quality_is_monotone() {
        let q = vec![("a".to_string(), vec![1.0])];
        let cfg = InferenceConfig::default();
        let lo = decode(&values(1.0, -1.0), &q, &cfg, 64.0, 64.0).unwrap();
        let hi = decode(&values(1.0, 0.5), &q, &cfg, 64.0, 64.0).unwrap();
        for (a, b) in lo.iter().zip(&hi) {
            assert!(b.det.score >= a.det.score);
        }
    }

    #[test]
    fn nms_examples() {
        let same = nms(
            vec![
                cand([0.0, 0.0, 4.0, 4.0], 0.8, "a", 1),
                cand([0.0, 0.0, 4.0, 4.0], 0.9, "a", 0),
            ],
            0.5,
            true,
        );
        assert_eq!(same.len(), 1);
        assert_eq!(same[0].det.score, 0.9);
        let apart = nms(
            vec![
                cand([0.0, 0.0, 4.0, 4.0], 0.8, "a", 0),
                cand([10.0, 10.0, 14.0, 14.0], 0.9, "a", 1),
            ],
            0.5,
            true,
        );
        assert_eq!(apart.len(), 2);
        let other = nms(
            vec![
                cand([0.0, 0.0, 4.0, 4.0], 0.8, "a", 0),
                cand([0.0, 0.0, 4.0, 4.0], 0.9, "b", 1),
            ],
            0.5,
            true,
        );
        assert_eq!(other.len(), 2);
        let agnostic = nms(
            vec![
                cand([0.0, 0.0, 4.0, 4.0], 0.8, "a", 0),
                cand([0.0, 0.0, 4.0, 4.0], 0.9, "b", 1),
            ],
            0.5,
            false,
        );
        assert_eq!(agnostic.len(), 1);
    }

    #[test]
    fn jsonl_round_trip() {
        let rows = vec![DetectionRecord {
            image_id: 3,
            query: "red ring".into(),
            bbox: Bbox::new(1.0, 2.0, 3.0, 4.0),
            score: 0.5,
        }];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"image_id\":3,\"query\":\"red ring\",\"box\":[1.0,2.0,3.0,4.0],\"score\":0.5}\n"
        );
        let back: Vec<DetectionRecord> = read_jsonl(buf.as_slice(), "dump").unwrap();
        assert_eq!(back, rows);
        assert!(read_jsonl::<DetectionRecord>(&b"{bad"[..], "dump").is_err());
    }
}
