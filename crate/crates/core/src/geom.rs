//! Axis-aligned boxes and dense location grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(x1, y1, x2, y2)` in pixels; serialized as a four-element array.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct Bbox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl From<[f32; 4]> for Bbox {
    fn from(a: [f32; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl From<Bbox> for [f32; 4] {
    fn from(b: Bbox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl Bbox {
    pub const fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_xywh(x: f32, y: f32, w: f32, h: f32) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(self) -> [f32; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        f64::from(self.width().max(0.0)) * f64::from(self.height().max(0.0))
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_finite(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Finite with positive width and height.
    pub fn is_valid(&self) -> bool {
        self.is_finite() && self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Input(format!("{what}: degenerate box {self:?}")))
        }
    }

    pub fn clip(&self, width: f32, height: f32) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    /// Strict interior test.
    pub fn contains_strict(&self, x: f32, y: f32) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }

    pub fn intersection(&self, o: &Bbox) -> f64 {
        let w = f64::from(self.x2.min(o.x2)) - f64::from(self.x1.max(o.x1));
        let h = f64::from(self.y2.min(o.y2)) - f64::from(self.y1.max(o.y1));
        w.max(0.0) * h.max(0.0)
    }

    pub fn hull(&self, o: &Bbox) -> Bbox {
        Bbox::new(
            self.x1.min(o.x1),
            self.y1.min(o.y1),
            self.x2.max(o.x2),
            self.y2.max(o.y2),
        )
    }

    pub fn iou(&self, o: &Bbox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// One dense prediction site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Location {
    pub level: usize,
    pub stride: usize,
    /// Grid indices within the level.
    pub gx: usize,
    pub gy: usize,
    /// Pixel center, `idx * stride + stride / 2`.
    pub cx: f32,
    pub cy: f32,
}

impl Location {
    /// Box from `(left, top, right, bottom)` distances around the center.
    pub fn decode(&self, ltrb: [f32; 4]) -> Bbox {
        Bbox::new(
            self.cx - ltrb[0],
            self.cy - ltrb[1],
            self.cx + ltrb[2],
            self.cy + ltrb[3],
        )
    }

    /// Distances from the center to the sides of `b`.
    pub fn encode(&self, b: &Bbox) -> [f32; 4] {
        [
            self.cx - b.x1,
            self.cy - b.y1,
            b.x2 - self.cx,
            b.y2 - self.cy,
        ]
    }
}

/// Shape of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelGrid {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

/// All locations, level by level, each level row-major.
pub fn locations(levels: &[LevelGrid]) -> Vec<Location> {
    let mut out = Vec::with_capacity(levels.iter().map(|l| l.h * l.w).sum());
    for (level, g) in levels.iter().enumerate() {
        let half = g.stride as f32 / 2.0;
        for gy in 0..g.h {
            for gx in 0..g.w {
                out.push(Location {
                    level,
                    stride: g.stride,
                    gx,
                    gy,
                    cx: (gx * g.stride) as f32 + half,
                    cy: (gy * g.stride) as f32 + half,
                });
            }
        }
    }
    out
}
