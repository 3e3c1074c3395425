//! COCO-style detection annotations: parsing, validation, writing and
//! summary statistics.
//!
//! Unknown fields on the top-level object, images, annotations and
//! categories are carried through untouched so a parse/write cycle does not
//! lose anything standard tooling expects to find.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident($inner:ty)) => {
        $(#[$doc])*
        #[derive(
            Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }

        impl From<$inner> for $name {
            fn from(v: $inner) -> Self {
                $name(v)
            }
        }
    };
}

id_type!(
    /// COCO `images[].id`.
    ImageId(u64)
);
id_type!(
    /// COCO `annotations[].id`.
    AnnotationId(u64)
);
id_type!(
    /// COCO `categories[].id`.
    CategoryId(u32)
);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Axis-aligned box `[x, y, width, height]` in pixels, top-left origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn has_area(&self) -> bool {
        self.w > 0.0 && self.h > 0.0
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// Intersects the box with `[0, width] x [0, height]`.
    pub fn clamped(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        BBox::new(x0, y0, (x1 - x0).max(0.0), (y1 - y0).max(0.0))
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Run-length counts, either as a plain list or COCO's compressed string.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Uncompressed(Vec<u64>),
    Compressed(String),
}

/// Column-major run-length mask; `size` is `[height, width]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [u32; 2],
    pub counts: RleCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    /// One or more polygons `[x0, y0, x1, y1, ...]`; the region is their union.
    Polygons(Vec<Vec<f64>>),
    Rle(Rle),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub id: AnnotationId,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Segmentation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default)]
    pub iscrowd: u8,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ObjectAnnotation {
    pub fn is_crowd(&self) -> bool {
        self.iscrowd != 0
    }

    /// Whether the object takes part in scoring: positive box area, and not
    /// a crowd region unless crowds are explicitly included.
    pub fn is_scoreable(&self, include_crowd: bool) -> bool {
        self.bbox.has_area() && (include_crowd || !self.is_crowd())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// The ordered list of categories in a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryTable {
    categories: Vec<Category>,
}

impl CategoryTable {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Invalid("category table is empty".into()));
        }
        let mut seen = HashSet::new();
        for c in &categories {
            if !seen.insert(c.id) {
                return Err(Error::Invalid(format!("duplicate category id {}", c.id)));
            }
        }
        Ok(CategoryTable { categories })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Category> {
        self.categories.iter()
    }

    pub fn get(&self, id: CategoryId) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn contains(&self, id: CategoryId) -> bool {
        self.get(id).is_some()
    }
}

/// A parsed and validated detection dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub licenses: Option<Value>,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<ObjectAnnotation>,
    pub categories: CategoryTable,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Non-fatal findings from parsing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParseReport {
    /// Annotations whose box was clamped to the image border.
    pub clamped: Vec<AnnotationId>,
    /// Annotations with zero box area (after clamping); never scored.
    pub zero_area: Vec<AnnotationId>,
}

impl DatasetIndex {
    pub fn image_map(&self) -> HashMap<ImageId, &ImageRecord> {
        self.images.iter().map(|im| (im.id, im)).collect()
    }

    /// Checks invariants and clamps out-of-bounds boxes in place.
    pub fn validate(&mut self) -> Result<ParseReport> {
        if self.categories.is_empty() {
            return Err(Error::Invalid("dataset has no categories".into()));
        }
        let mut cat_ids = HashSet::new();
        for c in self.categories.iter() {
            if !cat_ids.insert(c.id) {
                return Err(Error::Invalid(format!("duplicate category id {}", c.id)));
            }
        }

        let mut sizes: HashMap<ImageId, (f64, f64)> = HashMap::with_capacity(self.images.len());
        for im in &self.images {
            if im.width == 0 || im.height == 0 {
                return Err(Error::Invalid(format!(
                    "image {} has non-positive size {}x{}",
                    im.id, im.width, im.height
                )));
            }
            if sizes
                .insert(im.id, (im.width as f64, im.height as f64))
                .is_some()
            {
                return Err(Error::Invalid(format!("duplicate image id {}", im.id)));
            }
        }

        let mut report = ParseReport::default();
        let mut ann_ids = HashSet::with_capacity(self.annotations.len());
        let mut dangling = Vec::new();
        for ann in &mut self.annotations {
            if !ann_ids.insert(ann.id) {
                return Err(Error::Invalid(format!(
                    "duplicate annotation id {}",
                    ann.id
                )));
            }
            if !ann.bbox.is_finite() || ann.bbox.w < 0.0 || ann.bbox.h < 0.0 {
                return Err(Error::Invalid(format!(
                    "annotation {} has invalid bbox {:?}",
                    ann.id,
                    <[f64; 4]>::from(ann.bbox)
                )));
            }
            let Some(&(w, h)) = sizes.get(&ann.image_id) else {
                dangling.push(format!(
                    "annotation {} -> image_id {}",
                    ann.id, ann.image_id
                ));
                continue;
            };
            if !cat_ids.contains(&ann.category_id) {
                dangling.push(format!(
                    "annotation {} -> category_id {}",
                    ann.id, ann.category_id
                ));
                continue;
            }
            let clamped = ann.bbox.clamped(w, h);
            if clamped != ann.bbox {
                ann.bbox = clamped;
                report.clamped.push(ann.id);
            }
            if !ann.bbox.has_area() {
                report.zero_area.push(ann.id);
            }
        }
        if !dangling.is_empty() {
            return Err(Error::Integrity(format!(
                "dangling references: {}",
                dangling.join("; ")
            )));
        }
        if !report.clamped.is_empty() {
            log::warn!(
                "clamped {} boxes extending past image borders",
                report.clamped.len()
            );
        }
        if !report.zero_area.is_empty() {
            log::warn!(
                "{} zero-area boxes will be excluded from scoring",
                report.zero_area.len()
            );
        }
        Ok(report)
    }

    /// Parses and validates annotation JSON held in memory.
    pub fn from_json_slice(bytes: &[u8], context: &str) -> Result<(Self, ParseReport)> {
        let mut index: DatasetIndex =
            serde_json::from_slice(bytes).map_err(|e| json_error(context, e))?;
        let report = index.validate()?;
        Ok((index, report))
    }

    pub fn to_json_vec(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| json_error("serialize", e))
    }
}

fn json_error(context: &str, e: serde_json::Error) -> Error {
    Error::Json {
        context: context.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

pub fn parse_dataset(path: impl AsRef<Path>) -> Result<(DatasetIndex, ParseReport)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    DatasetIndex::from_json_slice(&bytes, &path.display().to_string())
}

pub fn write_dataset(index: &DatasetIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, index).map_err(|e| json_error("serialize", e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub images: usize,
    pub annotations: usize,
    pub crowd: usize,
    pub zero_area: usize,
    pub per_category: BTreeMap<CategoryId, usize>,
    pub mean_instances_per_image: f64,
    pub max_instances_per_image: usize,
}

pub fn dataset_stats(index: &DatasetIndex) -> DatasetStats {
    let mut per_image: HashMap<ImageId, usize> = index.images.iter().map(|i| (i.id, 0)).collect();
    let mut per_category: BTreeMap<CategoryId, usize> =
        index.categories.iter().map(|c| (c.id, 0)).collect();
    let mut crowd = 0;
    let mut zero_area = 0;
    for ann in &index.annotations {
        *per_image.entry(ann.image_id).or_default() += 1;
        *per_category.entry(ann.category_id).or_default() += 1;
        crowd += usize::from(ann.is_crowd());
        zero_area += usize::from(!ann.bbox.has_area());
    }
    let mean = if index.images.is_empty() {
        0.0
    } else {
        index.annotations.len() as f64 / index.images.len() as f64
    };
    DatasetStats {
        images: index.images.len(),
        annotations: index.annotations.len(),
        crowd,
        zero_area,
        per_category,
        mean_instances_per_image: mean,
        max_instances_per_image: per_image.values().copied().max().unwrap_or(0),
    }
}

/// Ids of the annotations that take part in scoring.
pub fn scoreable_ids(index: &DatasetIndex, include_crowd: bool) -> BTreeSet<AnnotationId> {
    index
        .annotations
        .iter()
        .filter(|a| a.is_scoreable(include_crowd))
        .map(|a| a.id)
        .collect()
}
