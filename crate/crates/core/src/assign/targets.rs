use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::atss::Assignment;
use crate::error::{Error, Result};
use crate::geom::Bbox;
use crate::text::EmbeddingBank;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Positive,
    Negative,
    Ignore,
}

/// How columns of queries without a box in this image are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Image classes plus pseudo-negatives; every cell is labelled.
    Supervised,
    /// Other captions of the batch are negatives everywhere.
    BatchNegatives,
    /// Other captions of the batch are ignored.
    NoBatchNegatives,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: Bbox,
    pub query: String,
}

/// Location-by-query training targets of one image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMatrix {
    pub queries: Vec<String>,
    pub num_locations: usize,
    cells: Vec<Cell>,
    /// `(location, assigned box)` for box and quality regression.
    pub positives: Vec<(usize, Bbox)>,
}

impl TargetMatrix {
    pub fn get(&self, loc: usize, q: usize) -> Cell {
        self.cells[loc * self.queries.len() + q]
    }

    pub fn row(&self, loc: usize) -> &[Cell] {
        let q = self.queries.len();
        &self.cells[loc * q..(loc + 1) * q]
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn count(&self, kind: Cell) -> usize {
        self.cells.iter().filter(|&&c| c == kind).count()
    }

    /// Same targets with the query columns reordered by `order`.
    pub fn permute_queries(&self, order: &[usize]) -> Self {
        let q = self.queries.len();
        let cells = (0..self.num_locations)
            .flat_map(|l| order.iter().map(move |&j| (l, j)))
            .map(|(l, j)| self.cells[l * q + j])
            .collect();
        Self {
            queries: order.iter().map(|&j| self.queries[j].clone()).collect(),
            num_locations: self.num_locations,
            cells,
            positives: self.positives.clone(),
        }
    }
}

pub fn build_targets(
    assignment: &Assignment,
    gts: &[GroundTruth],
    in_play: &[String],
    mode: TargetMode,
    bank: &EmbeddingBank,
) -> Result<TargetMatrix> {
    let mut seen = HashSet::new();
    for q in in_play {
        if !bank.contains(q) {
            return Err(Error::UnknownQuery(q.clone()));
        }
        if !seen.insert(q.as_str()) {
            return Err(Error::Input(format!("query `{q}` is in play twice")));
        }
    }
    let gt_cols = gts
        .iter()
        .map(|g| {
            in_play.iter().position(|q| *q == g.query).ok_or_else(|| {
                Error::Input(format!("ground-truth query `{}` is not in play", g.query))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let own: HashSet<usize> = gt_cols.iter().copied().collect();
    let absent = match mode {
        TargetMode::NoBatchNegatives => Cell::Ignore,
        TargetMode::Supervised | TargetMode::BatchNegatives => Cell::Negative,
    };

    let nq = in_play.len();
    let mut cells = Vec::with_capacity(assignment.num_locations() * nq);
    for g in &assignment.gt_of {
        let pos_col = g.map(|g| gt_cols[g]);
        cells.extend((0..nq).map(|q| {
            if Some(q) == pos_col {
                Cell::Positive
            } else if own.contains(&q) {
                Cell::Negative
            } else {
                absent
            }
        }));
    }
    Ok(TargetMatrix {
        queries: in_play.to_vec(),
        num_locations: assignment.num_locations(),
        cells,
        positives: assignment
            .positives()
            .map(|(l, g)| (l, gts[g].bbox))
            .collect(),
    })
}

/// Up to `n` distinct vocabulary entries not present in the image.
pub fn sample_pseudo_negatives<R: Rng + ?Sized>(
    present: &[String],
    vocabulary: &[String],
    n: usize,
    rng: &mut R,
) -> Vec<String> {
    let present: HashSet<&str> = present.iter().map(String::as_str).collect();
    let mut seen = HashSet::new();
    let pool: Vec<&String> = vocabulary
        .iter()
        .filter(|v| !present.contains(v.as_str()) && seen.insert(v.as_str()))
        .collect();
    pool.choose_multiple(rng, n.min(pool.len()))
        .map(|s| (*s).clone())
        .collect()
}
