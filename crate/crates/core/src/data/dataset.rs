//! COCO-style annotation files.
//!
//! ```json
//! {
//!   "images":      [{"id": 1, "width": 80, "height": 64, "file_name": "images/1.png"}],
//!   "annotations": [{"id": 1, "image_id": 1, "bbox": [x, y, w, h], "category_id": 3}],
//!   "categories":  [{"id": 3, "name": "red ring", "frequency_group": "rare"}]
//! }
//! ```
//!
//! `file_name` is relative to the directory holding the JSON file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Bbox;
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyGroup {
    Rare,
    Common,
    Frequent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageInfo {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    /// `[x, y, w, h]`
    pub bbox: [f32; 4],
    pub category_id: u64,
}

impl Annotation {
    pub fn bbox(&self) -> Bbox {
        let [x, y, w, h] = self.bbox;
        Bbox::from_xywh(x, y, w, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub id: u64,
    pub name: String,
    pub frequency_group: FrequencyGroup,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionDataset {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

impl DetectionDataset {
    pub fn validate(&self) -> Result<()> {
        let mut image_ids = HashMap::new();
        for (i, im) in self.images.iter().enumerate() {
            if im.width == 0 || im.height == 0 {
                return Err(Error::Data(format!(
                    "image {i} (id {}) has zero size",
                    im.id
                )));
            }
            if image_ids.insert(im.id, im).is_some() {
                return Err(Error::Data(format!("image {i}: duplicate id {}", im.id)));
            }
        }
        let mut cat_ids = HashSet::new();
        let mut names = HashSet::new();
        for (i, c) in self.categories.iter().enumerate() {
            if !cat_ids.insert(c.id) {
                return Err(Error::Data(format!("category {i}: duplicate id {}", c.id)));
            }
            if c.name.trim().is_empty() || !names.insert(c.name.as_str()) {
                return Err(Error::Data(format!(
                    "category {i}: empty or duplicate name `{}`",
                    c.name
                )));
            }
        }
        let mut ann_ids = HashSet::new();
        for (i, a) in self.annotations.iter().enumerate() {
            if !ann_ids.insert(a.id) {
                return Err(Error::Data(format!(
                    "annotation {i}: duplicate id {}",
                    a.id
                )));
            }
            let im = image_ids.get(&a.image_id).ok_or_else(|| {
                Error::Data(format!(
                    "annotation {i} (id {}) references missing image {}",
                    a.id, a.image_id
                ))
            })?;
            if !cat_ids.contains(&a.category_id) {
                return Err(Error::Data(format!(
                    "annotation {i} (id {}) references missing category {}",
                    a.id, a.category_id
                )));
            }
            let b = a.bbox();
            let (w, h) = (im.width as f32, im.height as f32);
            if !b.is_valid() || b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                return Err(Error::Data(format!(
                    "annotation {i} (id {}) has malformed bbox {:?} for a {}x{} image",
                    a.id, a.bbox, im.width, im.height
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Self =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("dataset JSON: {e}")))?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn category(&self, id: u64) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn category_by_name(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn names_in_group(&self, group: FrequencyGroup) -> Vec<String> {
        self.categories
            .iter()
            .filter(|c| c.frequency_group == group)
            .map(|c| c.name.clone())
            .collect()
    }

    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Annotations grouped by image id.
    pub fn by_image(&self) -> BTreeMap<u64, Vec<&Annotation>> {
        let mut m: BTreeMap<u64, Vec<&Annotation>> =
            self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            m.entry(a.image_id).or_default().push(a);
        }
        m
    }
}

/// Drops annotations of the `rare` categories; images and categories stay.
pub fn zero_shot_split(ds: &DetectionDataset, rare: &[u64]) -> Result<DetectionDataset> {
    for id in rare {
        if ds.category(*id).is_none() {
            return Err(Error::Input(format!("unknown category id {id}")));
        }
    }
    let rare: HashSet<u64> = rare.iter().copied().collect();
    Ok(DetectionDataset {
        images: ds.images.clone(),
        annotations: ds
            .annotations
            .iter()
            .filter(|a| !rare.contains(&a.category_id))
            .cloned()
            .collect(),
        categories: ds.categories.clone(),
    })
}

/// Decoded pixels keyed by image id.
pub type ImageStore = BTreeMap<u64, RgbImage>;

pub fn load_images(ds: &DetectionDataset, root: impl AsRef<Path>) -> Result<ImageStore> {
    let root = root.as_ref();
    ds.images
        .iter()
        .map(|im| {
            let path: PathBuf = root.join(&im.file_name);
            let img = image::open(&path)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
                .to_rgb8();
            if img.dimensions() != (im.width, im.height) {
                return Err(Error::Data(format!(
                    "{}: is {:?}, dataset says {}x{}",
                    path.display(),
                    img.dimensions(),
                    im.width,
                    im.height
                )));
            }
            Ok((im.id, img))
        })
        .collect()
}

pub fn save_images(
    ds: &DetectionDataset,
    store: &ImageStore,
    root: impl AsRef<Path>,
) -> Result<()> {
    let root = root.as_ref();
    for im in &ds.images {
        let img = store
            .get(&im.id)
            .ok_or_else(|| Error::Data(format!("no pixels for image {}", im.id)))?;
        let path = root.join(&im.file_name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        img.save(&path)?;
    }
    Ok(())
}

/// `[3, H', W']` in `[-1, 1]`, zero-padded on the bottom and right so both
/// sides are multiples of `divisor`.
pub fn image_tensor(img: &RgbImage, divisor: usize) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (ph, pw) = (h.div_ceil(divisor) * divisor, w.div_ceil(divisor) * divisor);
    let mut data = vec![0.0f32; 3 * ph * pw];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * ph + y as usize) * pw + x as usize] = f32::from(p.0[c]) / 127.5 - 1.0;
        }
    }
    Tensor::new([3, ph, pw], data).expect("sized above")
}

/// One line of the caption corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub image_id: u64,
    pub caption: String,
}
