//! Per-image feature grids, per-object pooling and the pooled-feature
//! archive.
//!
//! Feature-map container (one file per image, little-endian):
//!
//! ```text
//! b"UQFM0001" | u32 image_id | u32 grid_h | u32 grid_w | u32 dim | f32 * grid_h*grid_w*dim
//! ```
//!
//! Values are row-major with the channel index fastest. The archive
//! container is
//!
//! ```text
//! b"UQFA0001" | u32 dim | u64 count | count * (u64 annotation_id | u32 category_id | u8 pool_mode | f32 * dim)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    AnnotationId, BBox, CategoryId, DatasetIndex, ImageId, Rle, RleCounts, Segmentation,
};
use crate::error::{Error, Result};

pub const MAP_MAGIC: &[u8; 8] = b"UQFM0001";
pub const ARCHIVE_MAGIC: &[u8; 8] = b"UQFA0001";
const MAP_HEADER_LEN: usize = 8 + 4 * 4;

/// An encoder's spatial feature grid for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub image_id: u32,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    /// Row-major, channel fastest: `data[(r * grid_w + c) * dim + k]`.
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        image_id: u32,
        grid_h: usize,
        grid_w: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || dim == 0 {
            return Err(Error::Invalid(format!(
                "feature map shape {grid_h}x{grid_w}x{dim} has an empty axis"
            )));
        }
        let expected = grid_h
            .checked_mul(grid_w)
            .and_then(|n| n.checked_mul(dim))
            .ok_or_else(|| Error::Corrupt(format!("shape {grid_h}x{grid_w}x{dim} overflows")))?;
        if data.len() != expected {
            return Err(Error::Dimension {
                expected,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "feature map for image {image_id} has a non-finite value at offset {pos}"
            )));
        }
        Ok(FeatureMap {
            image_id,
            grid_h,
            grid_w,
            dim,
            data,
        })
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.grid_w + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MAP_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAP_MAGIC);
        for v in [
            self.image_id,
            self.grid_h as u32,
            self.grid_w as u32,
            self.dim as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAP_MAGIC {
            return Err(Error::Format("not a UQFM0001 feature map".into()));
        }
        if bytes.len() < MAP_HEADER_LEN {
            return Err(Error::Corrupt("truncated feature-map header".into()));
        }
        let mut r = ByteReader::new(&bytes[8..]);
        let image_id = r.u32()?;
        let grid_h = r.u32()? as usize;
        let grid_w = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let count = (grid_h as u64)
            .checked_mul(grid_w as u64)
            .and_then(|n| n.checked_mul(dim as u64))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corrupt("feature-map dimensions overflow".into()))?;
        let payload = r.rest();
        if payload.len() as u64 != count {
            return Err(Error::Corrupt(format!(
                "feature-map payload is {} bytes, header implies {count}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureMap::new(image_id, grid_h, grid_w, dim, data)
    }
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMap::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, map.to_bytes()).map_err(|e| Error::io(path, e))
}

/// How image pixels map onto grid cells.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridLayout {
    /// The grid spans the whole image on each axis independently.
    #[default]
    Stretch,
    /// The longer image side spans the grid; the shorter side covers only a
    /// leading part of it (resize-longest-side then pad, as SAM does).
    LongestSide,
}

/// Pixels per grid cell along each axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellGeometry {
    pub stride_x: f64,
    pub stride_y: f64,
    pub image_w: f64,
    pub image_h: f64,
}

impl CellGeometry {
    pub fn new(map: &FeatureMap, image_size: (f64, f64), layout: GridLayout) -> Self {
        let (w, h) = image_size;
        let (stride_x, stride_y) = match layout {
            GridLayout::Stretch => (w / map.grid_w as f64, h / map.grid_h as f64),
            GridLayout::LongestSide => {
                let side = w.max(h);
                (side / map.grid_w as f64, side / map.grid_h as f64)
            }
        };
        CellGeometry {
            stride_x,
            stride_y,
            image_w: w,
            image_h: h,
        }
    }
}

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    BoxMean,
    MaskMean,
}

impl PoolMode {
    fn code(self) -> u8 {
        match self {
            PoolMode::BoxMean => 0,
            PoolMode::MaskMean => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(PoolMode::BoxMean),
            1 => Ok(PoolMode::MaskMean),
            other => Err(Error::Corrupt(format!("unknown pool mode code {other}"))),
        }
    }
}

fn mean_of_cells(
    map: &FeatureMap,
    cells: impl IntoIterator<Item = (usize, usize)>,
) -> Option<Vec<f64>> {
    let mut acc = vec![0.0f64; map.dim];
    let mut n = 0usize;
    for (r, c) in cells {
        for (a, v) in acc.iter_mut().zip(map.cell(r, c)) {
            *a += f64::from(*v);
        }
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let inv = n as f64;
    acc.iter_mut().for_each(|a| *a /= inv);
    Some(acc)
}

/// Indices `i` in `0..n` whose cell center `(i + 0.5) * stride` lies in `[lo, hi)`.
fn centers_inside(lo: f64, hi: f64, stride: f64, n: usize) -> std::ops::Range<usize> {
    let first = ((lo / stride - 0.5).ceil().max(0.0) as usize).saturating_sub(1);
    let mut start = first.min(n);
    while start < n && (start as f64 + 0.5) * stride < lo {
        start += 1;
    }
    let mut end = start;
    while end < n && (end as f64 + 0.5) * stride < hi {
        end += 1;
    }
    start..end
}

/// Mean feature over the cells whose centers fall inside `bbox`, with the
/// grid spanning the image as in [`GridLayout::Stretch`].
pub fn pool_box(map: &FeatureMap, bbox: &BBox, image_size: (f64, f64)) -> Result<Vec<f64>> {
    pool_box_with(
        map,
        bbox,
        &CellGeometry::new(map, image_size, GridLayout::Stretch),
    )
}

/// Mean over cells whose centers lie inside the clamped box. A box too small
/// to contain any cell center pools the single cell containing its center.
pub fn pool_box_with(map: &FeatureMap, bbox: &BBox, geom: &CellGeometry) -> Result<Vec<f64>> {
    let b = bbox.clamped(geom.image_w, geom.image_h);
    if !b.has_area() {
        return Err(Error::DegenerateRegion(format!(
            "box {:?} has no area inside the {}x{} image",
            <[f64; 4]>::from(*bbox),
            geom.image_w,
            geom.image_h
        )));
    }
    let cols = centers_inside(b.x, b.x + b.w, geom.stride_x, map.grid_w);
    let rows = centers_inside(b.y, b.y + b.h, geom.stride_y, map.grid_h);
    let cells = rows.flat_map(|r| cols.clone().map(move |c| (r, c)));
    if let Some(v) = mean_of_cells(map, cells) {
        return Ok(v);
    }
    let (cx, cy) = b.center();
    let col = ((cx / geom.stride_x) as usize).min(map.grid_w - 1);
    let row = ((cy / geom.stride_y) as usize).min(map.grid_h - 1);
    Ok(map.cell(row, col).iter().map(|v| f64::from(*v)).collect())
}

/// A binary pixel mask over an image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBitmap {
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub bits: Vec<bool>,
}

impl MaskBitmap {
    /// Rasterizes a segmentation. Polygons are sampled at pixel centers with
    /// the even-odd rule and unioned; run-length masks are decoded
    /// column-major as in COCO.
    pub fn from_segmentation(seg: &Segmentation, width: usize, height: usize) -> Result<Self> {
        match seg {
            Segmentation::Polygons(polys) => Ok(rasterize_polygons(polys, width, height)),
            Segmentation::Rle(rle) => decode_rle(rle, width, height),
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Tight pixel bounding box of the set pixels.
    pub fn bounding_box(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.bits[y * self.width + x] {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX)
            .then(|| BBox::new(x0 as f64, y0 as f64, (x1 - x0) as f64, (y1 - y0) as f64))
    }
}

fn rasterize_polygons(polys: &[Vec<f64>], width: usize, height: usize) -> MaskBitmap {
    let mut bits = vec![false; width * height];
    for poly in polys {
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        if pts.len() < 3 {
            continue;
        }
        let ymin = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let ymax = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let row_lo = (ymin - 0.5).ceil().max(0.0) as usize;
        let row_hi = ((ymax - 0.5).floor().max(-1.0) + 1.0).min(height as f64) as usize;
        let mut xs = Vec::new();
        for y in row_lo..row_hi {
            let py = y as f64 + 0.5;
            xs.clear();
            for i in 0..pts.len() {
                let (ax, ay) = pts[i];
                let (bx, by) = pts[(i + 1) % pts.len()];
                if (ay <= py) != (by <= py) {
                    xs.push(ax + (py - ay) / (by - ay) * (bx - ax));
                }
            }
            xs.sort_by(|a, b| a.total_cmp(b));
            for span in xs.chunks_exact(2) {
                // Pixel centers px + 0.5 in [span[0], span[1]).
                let lo = (span[0] - 0.5).ceil().max(0.0) as usize;
                let hi = ((span[1] - 0.5).ceil().max(0.0) as usize).min(width);
                for x in lo..hi {
                    bits[y * width + x] = true;
                }
            }
        }
    }
    MaskBitmap {
        width,
        height,
        bits,
    }
}

/// Decodes COCO's compressed run-length string into counts.
pub fn decode_rle_string(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let c = i64::from(
                bytes
                    .get(p)
                    .copied()
                    .ok_or_else(|| Error::Corrupt("run-length string ends mid-value".into()))?,
            ) - 48;
            if !(0..64).contains(&c) || k > 12 {
                return Err(Error::Corrupt(format!("bad run-length byte at offset {p}")));
            }
            x |= (c & 0x1f) << (5 * k);
            let more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u64::try_from(c).map_err(|_| Error::Corrupt("negative run length".into())))
        .collect()
}

fn decode_rle(rle: &Rle, width: usize, height: usize) -> Result<MaskBitmap> {
    let [h, w] = rle.size;
    if h as usize != height || w as usize != width {
        return Err(Error::Invalid(format!(
            "run-length mask size {h}x{w} does not match image {height}x{width}"
        )));
    }
    let counts = match &rle.counts {
        RleCounts::Uncompressed(c) => c.clone(),
        RleCounts::Compressed(s) => decode_rle_string(s)?,
    };
    let total = width * height;
    let mut bits = vec![false; total];
    let mut pos = 0usize;
    let mut value = false;
    for run in counts {
        let run = run as usize;
        if pos + run > total {
            return Err(Error::Corrupt(format!(
                "run-length mask covers more than {total} pixels"
            )));
        }
        if value {
            for idx in pos..pos + run {
                // Column-major index -> row-major.
                let (x, y) = (idx / height, idx % height);
                bits[y * width + x] = true;
            }
        }
        pos += run;
        value = !value;
    }
    Ok(MaskBitmap {
        width,
        height,
        bits,
    })
}

/// Mean feature over the cells at least half covered by the mask. Falls back
/// to [`pool_box`] over the mask's bounding box when no cell qualifies.
pub fn pool_mask(
    map: &FeatureMap,
    mask: &Segmentation,
    image_size: (f64, f64),
) -> Result<Vec<f64>> {
    pool_mask_with(
        map,
        mask,
        &CellGeometry::new(map, image_size, GridLayout::Stretch),
    )
}

pub fn pool_mask_with(
    map: &FeatureMap,
    mask: &Segmentation,
    geom: &CellGeometry,
) -> Result<Vec<f64>> {
    let (w, h) = (geom.image_w as usize, geom.image_h as usize);
    let bitmap = MaskBitmap::from_segmentation(mask, w, h)?;
    pool_bitmap(map, &bitmap, geom)
}

pub fn pool_bitmap(map: &FeatureMap, bitmap: &MaskBitmap, geom: &CellGeometry) -> Result<Vec<f64>> {
    let Some(bounds) = bitmap.bounding_box() else {
        return Err(Error::DegenerateRegion("mask has no pixels".into()));
    };
    let col_of = |x: usize| (((x as f64 + 0.5) / geom.stride_x) as usize).min(map.grid_w - 1);
    let row_of = |y: usize| (((y as f64 + 0.5) / geom.stride_y) as usize).min(map.grid_h - 1);
    let cols: Vec<usize> = (0..bitmap.width).map(col_of).collect();

    let mut total = vec![0usize; map.grid_h * map.grid_w];
    let mut covered = vec![0usize; map.grid_h * map.grid_w];
    for y in 0..bitmap.height {
        let row = row_of(y) * map.grid_w;
        let bits = &bitmap.bits[y * bitmap.width..(y + 1) * bitmap.width];
        for (x, &on) in bits.iter().enumerate() {
            let cell = row + cols[x];
            total[cell] += 1;
            covered[cell] += usize::from(on);
        }
    }
    let cells = (0..map.grid_h * map.grid_w)
        .filter(|&i| total[i] > 0 && 2 * covered[i] >= total[i])
        .map(|i| (i / map.grid_w, i % map.grid_w));
    match mean_of_cells(map, cells) {
        Some(v) => Ok(v),
        None => pool_box_with(map, &bounds, geom),
    }
}

/// One pooled object vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeature {
    pub annotation_id: AnnotationId,
    pub category_id: CategoryId,
    pub vector: Vec<f32>,
    pub pool_mode: PoolMode,
}

/// Pooled vectors for every scored object, keyed (and ordered) by
/// annotation id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureArchive {
    pub dim: usize,
    pub entries: BTreeMap<AnnotationId, PooledFeature>,
    pub provenance: String,
}

impl FeatureArchive {
    pub fn new(dim: usize, provenance: impl Into<String>) -> Self {
        FeatureArchive {
            dim,
            entries: BTreeMap::new(),
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, entry: PooledFeature) -> Result<()> {
        if entry.vector.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: entry.vector.len(),
            });
        }
        if let Some(pos) = entry.vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "annotation {} has a non-finite feature at channel {pos}",
                entry.annotation_id
            )));
        }
        if self.entries.contains_key(&entry.annotation_id) {
            return Err(Error::Invalid(format!(
                "duplicate archive entry for annotation {}",
                entry.annotation_id
            )));
        }
        self.entries.insert(entry.annotation_id, entry);
        Ok(())
    }

    pub fn per_class_counts(&self) -> BTreeMap<CategoryId, usize> {
        let mut out = BTreeMap::new();
        for e in self.entries.values() {
            *out.entry(e.category_id).or_default() += 1;
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in self.entries.values() {
            w.write_all(&e.annotation_id.0.to_le_bytes())?;
            w.write_all(&e.category_id.0.to_le_bytes())?;
            w.write_all(&[e.pool_mode.code()])?;
            for v in &e.vector {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != ARCHIVE_MAGIC {
            return Err(Error::Format("not a UQFA0001 feature archive".into()));
        }
        let mut r = ByteReader::new(&bytes[8..]);
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        let entry_len = 8 + 4 + 1 + 4 * dim as u64;
        if count.checked_mul(entry_len) != Some(r.remaining() as u64) {
            return Err(Error::Corrupt(format!(
                "archive payload is {} bytes, header implies {count} entries of {entry_len}",
                r.remaining()
            )));
        }
        let mut archive = FeatureArchive::new(dim, "uqfa-file");
        for _ in 0..count {
            let annotation_id = AnnotationId(r.u64()?);
            let category_id = CategoryId(r.u32()?);
            let pool_mode = PoolMode::from_code(r.u8()?)?;
            let vector = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            archive.insert(PooledFeature {
                annotation_id,
                category_id,
                vector,
                pool_mode,
            })?;
        }
        Ok(archive)
    }
}

pub fn write_archive(archive: &FeatureArchive, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    archive
        .write_to(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<FeatureArchive> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut archive = FeatureArchive::from_bytes(&bytes)?;
    archive.provenance = path.display().to_string();
    Ok(archive)
}

/// Supplies feature maps one image at a time.
pub trait MapSource {
    /// `Ok(None)` when no map exists for the image.
    fn load(&self, image: ImageId) -> Result<Option<FeatureMap>>;
}

/// Maps stored as `<image_id>.uqfm` in a directory, or listed in an
/// optional `manifest.tsv` of `file<TAB>image_id` lines.
#[derive(Debug, Clone)]
pub struct DirectorySource {
    dir: PathBuf,
    manifest: Option<HashMap<ImageId, PathBuf>>,
}

impl DirectorySource {
    pub const MANIFEST: &'static str = "manifest.tsv";

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(Error::io(
                &dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "feature directory not found"),
            ));
        }
        let manifest_path = dir.join(Self::MANIFEST);
        let manifest = if manifest_path.is_file() {
            let text =
                fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
            let mut map = HashMap::new();
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (file, id) = line.split_once('\t').ok_or_else(|| Error::Parse {
                    line: n + 1,
                    message: "expected `file<TAB>image_id`".into(),
                })?;
                let id: u64 = id.trim().parse().map_err(|_| Error::Parse {
                    line: n + 1,
                    message: format!("bad image id `{id}`"),
                })?;
                map.insert(ImageId(id), dir.join(file));
            }
            Some(map)
        } else {
            None
        };
        Ok(DirectorySource { dir, manifest })
    }

    pub fn path_for(&self, image: ImageId) -> Option<PathBuf> {
        match &self.manifest {
            Some(m) => m.get(&image).cloned(),
            None => Some(self.dir.join(format!("{image}.uqfm"))),
        }
    }
}

impl MapSource for DirectorySource {
    fn load(&self, image: ImageId) -> Result<Option<FeatureMap>> {
        match self.path_for(image) {
            Some(p) if p.is_file() => read_feature_map(p).map(Some),
            _ => Ok(None),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PoolOptions {
    pub mode: PoolMode,
    pub include_crowd: bool,
    pub skip_missing: bool,
    pub layout: GridLayout,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoolReport {
    pub pooled: usize,
    pub excluded_crowd: usize,
    pub excluded_zero_area: usize,
    /// Mask pooling requested but the annotation had no segmentation.
    pub box_fallbacks: usize,
    pub missing_images: Vec<ImageId>,
    /// Annotations not pooled because their image's map was missing.
    pub skipped_annotations: usize,
    pub per_class: BTreeMap<CategoryId, usize>,
}

/// Pools one vector per scoreable annotation. Images are visited in
/// ascending id order and each map is dropped before the next is loaded.
pub fn build_archive(
    index: &DatasetIndex,
    source: &dyn MapSource,
    options: &PoolOptions,
) -> Result<(FeatureArchive, PoolReport)> {
    let mut report = PoolReport::default();
    let mut by_image: BTreeMap<ImageId, Vec<usize>> = BTreeMap::new();
    for (i, ann) in index.annotations.iter().enumerate() {
        if !ann.bbox.has_area() {
            report.excluded_zero_area += 1;
        } else if ann.is_crowd() && !options.include_crowd {
            report.excluded_crowd += 1;
        } else {
            by_image.entry(ann.image_id).or_default().push(i);
        }
    }
    let images = index.image_map();
    let mut archive: Option<FeatureArchive> = None;
    for (image_id, ann_idx) in &by_image {
        let image = images.get(image_id).ok_or_else(|| {
            Error::Integrity(format!("annotation references missing image {image_id}"))
        })?;
        let Some(map) = source.load(*image_id)? else {
            report.missing_images.push(*image_id);
            report.skipped_annotations += ann_idx.len();
            continue;
        };
        if u64::from(map.image_id) != image_id.0 {
            return Err(Error::Corrupt(format!(
                "feature map for image {image_id} carries image_id {}",
                map.image_id
            )));
        }
        let archive = archive.get_or_insert_with(|| {
            FeatureArchive::new(map.dim, format!("uqcurate-pool {:?}", options.mode))
        });
        if map.dim != archive.dim {
            return Err(Error::Dimension {
                expected: archive.dim,
                found: map.dim,
            });
        }
        let geom = CellGeometry::new(
            &map,
            (image.width as f64, image.height as f64),
            options.layout,
        );
        for &i in ann_idx {
            let ann = &index.annotations[i];
            let (vector, mode) = match (options.mode, &ann.segmentation) {
                (PoolMode::MaskMean, Some(seg)) => {
                    (pool_mask_with(&map, seg, &geom)?, PoolMode::MaskMean)
                }
                (PoolMode::MaskMean, None) => {
                    report.box_fallbacks += 1;
                    (pool_box_with(&map, &ann.bbox, &geom)?, PoolMode::BoxMean)
                }
                (PoolMode::BoxMean, _) => {
                    (pool_box_with(&map, &ann.bbox, &geom)?, PoolMode::BoxMean)
                }
            };
            archive.insert(PooledFeature {
                annotation_id: ann.id,
                category_id: ann.category_id,
                vector: vector.into_iter().map(|v| v as f32).collect(),
                pool_mode: mode,
            })?;
            report.pooled += 1;
            *report.per_class.entry(ann.category_id).or_default() += 1;
        }
    }
    if !report.missing_images.is_empty() {
        if options.skip_missing {
            log::warn!(
                "skipped {} images without feature maps ({} annotations)",
                report.missing_images.len(),
                report.skipped_annotations
            );
        } else {
            return Err(Error::MissingFeatureMaps(report.missing_images));
        }
    }
    let archive = archive.ok_or(Error::Empty("no annotation could be pooled"))?;
    Ok((archive, report))
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos + 8)))?;
        self.pos = end;
        Ok(slice.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        self.take().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.take().map(u64::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32> {
        self.take().map(f32::from_le_bytes)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}
