//! Procedural benchmark: coloured shapes on noise, with a zero-shot split and
//! a captioned image corpus.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{
    load_images, save_images, zero_shot_split, Annotation, CaptionRecord, Category,
    DetectionDataset, FrequencyGroup, ImageInfo, ImageStore,
};
use crate::error::{Error, Result};
use crate::geom::Bbox;
use crate::infer::{load_jsonl, save_jsonl};
use crate::text::{render_templates, TemplateList};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Diamond => "diamond",
        }
    }

    /// Whether the pixel center `(px, py)`, relative to the shape's
    /// rectangle `w x h`, is covered.
    pub fn covers(self, px: f32, py: f32, w: f32, h: f32) -> bool {
        let (u, v) = ((px / w) * 2.0 - 1.0, (py / h) * 2.0 - 1.0);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Ring => {
                let r = u * u + v * v;
                (0.36..=1.0).contains(&r)
            }
            // apex at top center, base along the bottom edge; widened by half
            // a pixel so the apex row is not lost
            ShapeKind::Triangle => u.abs() <= (v + 1.0) / 2.0 + 1.0 / w,
            ShapeKind::Cross => u.abs() <= 0.34 || v.abs() <= 0.34,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0 + 1.0 / w.min(h),
        }
    }
}

/// Named colours available to the generator.
pub const PALETTE: &[(&str, [u8; 3])] = &[
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [50, 80, 235]),
    ("yellow", [235, 215, 40]),
    ("magenta", [215, 50, 205]),
    ("white", [240, 240, 240]),
    ("cyan", [40, 205, 215]),
    ("orange", [245, 135, 30]),
];

fn color_rgb(name: &str) -> Result<[u8; 3]> {
    PALETTE
        .iter()
        .find(|(n, _)| *n == name)
        .map(|p| p.1)
        .ok_or_else(|| Error::Config(format!("unknown colour `{name}`")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub width: u32,
    pub height: u32,
    pub colors: Vec<String>,
    pub shapes: Vec<ShapeKind>,
    pub num_rare: usize,
    pub num_common: usize,
    pub num_frequent: usize,
    /// Relative sampling weight of (rare, common, frequent) in training images.
    pub group_weights: [f64; 3],
    pub train_images: usize,
    pub val_images: usize,
    pub corpus_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub corpus_max_objects: usize,
    pub min_size: u32,
    pub max_size: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 80,
            height: 64,
            colors: ["red", "green", "blue", "yellow", "magenta", "white"]
                .map(String::from)
                .to_vec(),
            shapes: vec![
                ShapeKind::Circle,
                ShapeKind::Square,
                ShapeKind::Triangle,
                ShapeKind::Ring,
            ],
            num_rare: 8,
            num_common: 8,
            num_frequent: 8,
            group_weights: [1.0, 2.0, 4.0],
            train_images: 480,
            val_images: 160,
            corpus_images: 3000,
            min_objects: 1,
            max_objects: 3,
            corpus_max_objects: 1,
            min_size: 10,
            max_size: 26,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let vocab = self.colors.len() * self.shapes.len();
        let wanted = self.num_rare + self.num_common + self.num_frequent;
        if wanted == 0 || wanted > vocab {
            return Err(Error::Config(format!(
                "{wanted} categories requested but the colour x shape vocabulary has {vocab}"
            )));
        }
        for c in &self.colors {
            color_rgb(c)?;
        }
        if self.min_objects == 0
            || self.min_objects > self.max_objects
            || self.corpus_max_objects == 0
        {
            return Err(Error::Config(
                "objects per image must satisfy 1 <= min <= max".into(),
            ));
        }
        if self.min_size < 4
            || self.min_size > self.max_size
            || self.max_size >= self.width.min(self.height)
        {
            return Err(Error::Config(format!(
                "object sizes {}..={} do not fit a {}x{} image",
                self.min_size, self.max_size, self.width, self.height
            )));
        }
        if self
            .group_weights
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::Config("group weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Category table: colour x shape pairs in a seeded order, the first
    /// `num_rare` rare, then common, then frequent. Ids start at 1.
    pub fn categories(&self) -> Result<Vec<Category>> {
        self.validate()?;
        let mut combos: Vec<(String, ShapeKind)> = self
            .colors
            .iter()
            .flat_map(|c| self.shapes.iter().map(move |s| (c.clone(), *s)))
            .collect();
        let mut rng = stream(self.seed, 0);
        combos.shuffle(&mut rng);
        let groups = std::iter::repeat_n(FrequencyGroup::Rare, self.num_rare)
            .chain(std::iter::repeat_n(FrequencyGroup::Common, self.num_common))
            .chain(std::iter::repeat_n(
                FrequencyGroup::Frequent,
                self.num_frequent,
            ));
        Ok(combos
            .into_iter()
            .zip(groups)
            .enumerate()
            .map(|(i, ((color, shape), g))| Category {
                id: i as u64 + 1,
                name: format!("{color} {}", shape.name()),
                frequency_group: g,
            })
            .collect())
    }
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

/// Generated benchmark. `train_truth` and `corpus` carry the hidden true boxes of the caption
/// images for auditing; training code only reads its image table.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBundle {
    pub spec: SyntheticSpec,
    pub train: DetectionDataset,
    /// Train split with every object annotated, rare ones included.
    pub train_truth: DetectionDataset,
    pub val: DetectionDataset,
    pub corpus: DetectionDataset,
    pub captions: Vec<CaptionRecord>,
    pub images: ImageStore,
}

pub const TRAIN_ID_BASE: u64 = 1;
pub const VAL_ID_BASE: u64 = 1_000_001;
pub const CORPUS_ID_BASE: u64 = 2_000_001;

/// The covered pixels of `shape` drawn in `rect` (integer corners).
pub fn render_mask(shape: ShapeKind, rect: &Bbox) -> Vec<(u32, u32)> {
    let (x0, y0) = (rect.x1 as u32, rect.y1 as u32);
    let (w, h) = (rect.width(), rect.height());
    let mut out = Vec::new();
    for dy in 0..h as u32 {
        for dx in 0..w as u32 {
            if shape.covers(dx as f32 + 0.5, dy as f32 + 0.5, w, h) {
                out.push((x0 + dx, y0 + dy));
            }
        }
    }
    out
}

struct Placed {
    cat: usize,
    rect: Bbox,
}

struct Painter<'a> {
    spec: &'a SyntheticSpec,
    cats: &'a [Category],
    shapes: Vec<ShapeKind>,
    colors: Vec<[u8; 3]>,
}

impl Painter<'_> {
    fn place(&self, rng: &mut ChaCha8Rng, placed: &[Placed]) -> Option<Bbox> {
        let s = self.spec;
        for _ in 0..50 {
            let w = rng.random_range(s.min_size..=s.max_size);
            let h = rng.random_range(s.min_size..=s.max_size);
            let x = rng.random_range(0..=s.width - w);
            let y = rng.random_range(0..=s.height - h);
            let r = Bbox::new(x as f32, y as f32, (x + w) as f32, (y + h) as f32);
            let grown = Bbox::new(r.x1 - 1.0, r.y1 - 1.0, r.x2 + 1.0, r.y2 + 1.0);
            if placed.iter().all(|p| p.rect.intersection(&grown) == 0.0) {
                return Some(r);
            }
        }
        None
    }

    fn paint(&self, rng: &mut ChaCha8Rng, objects: &[Placed]) -> RgbImage {
        let s = self.spec;
        let base: i32 = rng.random_range(30..90);
        let mut img = RgbImage::from_fn(s.width, s.height, |_, _| {
            let v = (base + rng.random_range(-25..=25)).clamp(0, 255) as u8;
            Rgb([v, v, v])
        });
        for o in objects {
            let c = self.colors[o.cat];
            let jitter: i32 = rng.random_range(-15..=15);
            let col = c.map(|v| (i32::from(v) + jitter).clamp(0, 255) as u8);
            for (x, y) in render_mask(self.shapes[o.cat], &o.rect) {
                img.put_pixel(x, y, Rgb(col));
            }
        }
        img
    }

    /// `count` images; categories drawn with per-category `weights`.
    fn images(
        &self,
        rng: &mut ChaCha8Rng,
        count: usize,
        id_base: u64,
        weights: &[f64],
        max_objects: usize,
        store: &mut ImageStore,
    ) -> Result<(DetectionDataset, Vec<Vec<usize>>)> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Config(
                "category sampling weights sum to zero".into(),
            ));
        }
        let mut ds = DetectionDataset {
            categories: self.cats.to_vec(),
            ..Default::default()
        };
        let mut contents = Vec::with_capacity(count);
        for i in 0..count {
            let id = id_base + i as u64;
            let n =
                rng.random_range(self.spec.min_objects..=max_objects.max(self.spec.min_objects));
            let mut placed: Vec<Placed> = Vec::new();
            for _ in 0..n {
                let mut u = rng.random_range(0.0..total);
                let mut cat = weights.len() - 1;
                for (k, w) in weights.iter().enumerate() {
                    if u < *w {
                        cat = k;
                        break;
                    }
                    u -= w;
                }
                if let Some(rect) = self.place(rng, &placed) {
                    placed.push(Placed { cat, rect });
                }
            }
            store.insert(id, self.paint(rng, &placed));
            ds.images.push(ImageInfo {
                id,
                width: self.spec.width,
                height: self.spec.height,
                file_name: format!("images/{id}.png"),
            });
            for p in &placed {
                ds.annotations.push(Annotation {
                    id: ds.annotations.len() as u64 + id_base,
                    image_id: id,
                    bbox: p.rect.to_xywh(),
                    category_id: self.cats[p.cat].id,
                });
            }
            contents.push(placed.iter().map(|p| p.cat).collect());
        }
        Ok((ds, contents))
    }
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticBundle> {
    let cats = spec.categories()?;
    let parse = |c: &Category| -> Result<(ShapeKind, [u8; 3])> {
        let (color, shape) = c
            .name
            .split_once(' ')
            .ok_or_else(|| Error::Config(format!("category `{}`", c.name)))?;
        let shape = *spec
            .shapes
            .iter()
            .find(|s| s.name() == shape)
            .ok_or_else(|| Error::Config(format!("category `{}`", c.name)))?;
        Ok((shape, color_rgb(color)?))
    };
    let parsed = cats.iter().map(parse).collect::<Result<Vec<_>>>()?;
    let painter = Painter {
        spec,
        cats: &cats,
        shapes: parsed.iter().map(|p| p.0).collect(),
        colors: parsed.iter().map(|p| p.1).collect(),
    };
    let group_weight = |g: FrequencyGroup| match g {
        FrequencyGroup::Rare => spec.group_weights[0],
        FrequencyGroup::Common => spec.group_weights[1],
        FrequencyGroup::Frequent => spec.group_weights[2],
    };
    let train_w: Vec<f64> = cats
        .iter()
        .map(|c| group_weight(c.frequency_group))
        .collect();
    let uniform = vec![1.0; cats.len()];

    let mut images = ImageStore::new();
    let (full_train, _) = painter.images(
        &mut stream(spec.seed, 1),
        spec.train_images,
        TRAIN_ID_BASE,
        &train_w,
        spec.max_objects,
        &mut images,
    )?;
    let rare: Vec<u64> = cats
        .iter()
        .filter(|c| c.frequency_group == FrequencyGroup::Rare)
        .map(|c| c.id)
        .collect();
    let train = zero_shot_split(&full_train, &rare)?;
    let (val, _) = painter.images(
        &mut stream(spec.seed, 2),
        spec.val_images,
        VAL_ID_BASE,
        &uniform,
        spec.max_objects,
        &mut images,
    )?;
    let mut crng = stream(spec.seed, 3);
    let (corpus, contents) = painter.images(
        &mut crng,
        spec.corpus_images,
        CORPUS_ID_BASE,
        &uniform,
        spec.corpus_max_objects,
        &mut images,
    )?;
    let templates = TemplateList::default();
    let mut captions = Vec::new();
    for (im, objs) in corpus.images.iter().zip(&contents) {
        if objs.is_empty() {
            continue;
        }
        let named = objs[crng.random_range(0..objs.len())];
        let text = render_templates(&cats[named].name, &templates)?.remove(0);
        captions.push(CaptionRecord {
            image_id: im.id,
            caption: text.raw().to_string(),
        });
    }
    Ok(SyntheticBundle {
        spec: spec.clone(),
        train,
        train_truth: full_train,
        val,
        corpus,
        captions,
        images,
    })
}

impl SyntheticBundle {
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("spec.json"),
            serde_json::to_string_pretty(&self.spec)?,
        )?;
        self.train.save(dir.join("train.json"))?;
        self.train_truth.save(dir.join("train_truth.json"))?;
        self.val.save(dir.join("val.json"))?;
        self.corpus.save(dir.join("corpus.json"))?;
        save_jsonl(dir.join("captions.jsonl"), &self.captions)?;
        for ds in [&self.train, &self.val, &self.corpus] {
            save_images(ds, &self.images, dir)?;
        }
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec_text = std::fs::read_to_string(dir.join("spec.json"))?;
        let spec =
            serde_json::from_str(&spec_text).map_err(|e| Error::Data(format!("spec.json: {e}")))?;
        let train = DetectionDataset::load(dir.join("train.json"))?;
        let train_truth = DetectionDataset::load(dir.join("train_truth.json"))?;
        let val = DetectionDataset::load(dir.join("val.json"))?;
        let corpus = DetectionDataset::load(dir.join("corpus.json"))?;
        let captions = load_jsonl(dir.join("captions.jsonl"))?;
        let mut images = ImageStore::new();
        for ds in [&train, &val, &corpus] {
            images.extend(load_images(ds, dir)?);
        }
        Ok(Self {
            spec,
            train,
            train_truth,
            val,
            corpus,
            captions,
            images,
        })
    }
}
