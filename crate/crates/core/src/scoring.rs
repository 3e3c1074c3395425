//! Per-class log/min-max normalization of Mahalanobis distances into
//! uncertainty scores, score-file I/O and score histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{AnnotationId, CategoryId};
use crate::density::ClassConditionalGaussian;
use crate::error::{Error, Result};
use crate::features::FeatureArchive;

/// Distances are clamped to this floor before taking logs.
pub const DISTANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreRecord {
    pub annotation_id: AnnotationId,
    pub category_id: CategoryId,
    pub mahalanobis: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub dim: usize,
    pub model_checksum: u64,
    /// Sorted by annotation id.
    pub records: Vec<ScoreRecord>,
    /// Per class `(min ln M, max ln M)`.
    pub per_class_minmax: BTreeMap<CategoryId, (f64, f64)>,
}

/// Scores for one class plus the log range they were scaled by.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub scores: Vec<f64>,
    pub min_log: f64,
    pub max_log: f64,
}

impl Normalized {
    /// All distances in the class had the same log, so every score is 0.
    pub fn is_degenerate(&self) -> bool {
        self.max_log <= self.min_log
    }
}

fn log_distance(m: f64) -> f64 {
    m.max(DISTANCE_FLOOR).ln()
}

fn scale(log_m: f64, min_log: f64, max_log: f64) -> f64 {
    if max_log > min_log {
        ((log_m - min_log) / (max_log - min_log)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Log-transforms and min-max scales one class's distances.
pub fn normalize(distances: &[f64]) -> Result<Normalized> {
    if distances.is_empty() {
        return Err(Error::Empty("cannot normalize an empty class"));
    }
    let logs: Vec<f64> = distances.iter().map(|&m| log_distance(m)).collect();
    let min_log = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let max_log = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scores = logs.iter().map(|&l| scale(l, min_log, max_log)).collect();
    Ok(Normalized {
        scores,
        min_log,
        max_log,
    })
}

/// [`normalize`] applied to each class independently.
pub fn normalize_per_class(
    distances: &BTreeMap<CategoryId, Vec<f64>>,
) -> Result<BTreeMap<CategoryId, Normalized>> {
    distances
        .iter()
        .map(|(cat, d)| Ok((*cat, normalize(d)?)))
        .collect()
}

impl ScoreTable {
    /// Builds a table from raw distances, deriving the per-class ranges.
    pub fn from_distances(
        dim: usize,
        model_checksum: u64,
        mut rows: Vec<(AnnotationId, CategoryId, f64)>,
    ) -> Result<Self> {
        rows.sort_by_key(|r| r.0);
        let mut minmax: BTreeMap<CategoryId, (f64, f64)> = BTreeMap::new();
        for &(_, cat, m) in &rows {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(Error::Invalid(format!(
                    "distance {m} is not a finite non-negative value"
                )));
            }
            let l = log_distance(m);
            let e = minmax.entry(cat).or_insert((l, l));
            e.0 = e.0.min(l);
            e.1 = e.1.max(l);
        }
        for (cat, (lo, hi)) in &minmax {
            if hi <= lo {
                log::warn!("class {cat}: all distances equal, scores set to 0");
            }
        }
        let records = rows
            .into_iter()
            .map(|(annotation_id, category_id, mahalanobis)| {
                let (lo, hi) = minmax[&category_id];
                ScoreRecord {
                    annotation_id,
                    category_id,
                    mahalanobis,
                    score: scale(log_distance(mahalanobis), lo, hi),
                }
            })
            .collect();
        Ok(ScoreTable {
            dim,
            model_checksum,
            records,
            per_class_minmax: minmax,
        })
    }

    pub fn degenerate_classes(&self) -> Vec<CategoryId> {
        self.per_class_minmax
            .iter()
            .filter(|(_, (lo, hi))| hi <= lo)
            .map(|(c, _)| *c)
            .collect()
    }

    pub fn class_records(&self, cat: CategoryId) -> impl Iterator<Item = &ScoreRecord> {
        self.records.iter().filter(move |r| r.category_id == cat)
    }

    pub fn categories(&self) -> impl Iterator<Item = CategoryId> + '_ {
        self.per_class_minmax.keys().copied()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "uq-scores v1 dim={} model={:016x}",
            self.dim, self.model_checksum
        )?;
        for r in &self.records {
            writeln!(
                w,
                "{}\t{}\t{:?}\t{:?}",
                r.annotation_id, r.category_id, r.mahalanobis, r.score
            )?;
        }
        Ok(())
    }

    pub fn read_from(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let bad = |line: usize, message: String| Error::Parse { line, message };
        let header = match lines.next() {
            Some((_, l)) => l.map_err(|e| bad(1, e.to_string()))?,
            None => return Err(bad(1, "missing header".into())),
        };
        let mut fields = header.split_whitespace();
        if fields.next() != Some("uq-scores") || fields.next() != Some("v1") {
            return Err(bad(
                1,
                format!("expected `uq-scores v1` header, got `{header}`"),
            ));
        }
        let mut dim = None;
        let mut checksum = None;
        for f in fields {
            match f.split_once('=') {
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                Some(("model", v)) => checksum = u64::from_str_radix(v, 16).ok(),
                _ => return Err(bad(1, format!("unexpected header field `{f}`"))),
            }
        }
        let (Some(dim), Some(checksum)) = (dim, checksum) else {
            return Err(bad(1, "header needs dim=<d> and model=<checksum>".into()));
        };

        let mut rows = Vec::new();
        let mut stored_scores = Vec::new();
        for (i, line) in lines {
            let n = i + 1;
            let line = line.map_err(|e| bad(n, e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(
                    n,
                    format!("expected 4 tab-separated fields, got {}", cols.len()),
                ));
            }
            let ann = cols[0]
                .parse::<u64>()
                .map_err(|_| bad(n, format!("bad annotation id `{}`", cols[0])))?;
            let cat = cols[1]
                .parse::<u32>()
                .map_err(|_| bad(n, format!("bad category id `{}`", cols[1])))?;
            let m = cols[2]
                .parse::<f64>()
                .map_err(|_| bad(n, format!("bad distance `{}`", cols[2])))?;
            let s = cols[3]
                .parse::<f64>()
                .map_err(|_| bad(n, format!("bad score `{}`", cols[3])))?;
            if !(m >= 0.0 && m.is_finite()) {
                return Err(bad(n, format!("distance {m} out of range")));
            }
            if !(0.0..=1.0).contains(&s) {
                return Err(bad(n, format!("score {s} outside [0, 1]")));
            }
            rows.push((AnnotationId(ann), CategoryId(cat), m));
            stored_scores.push((AnnotationId(ann), s, n));
        }
        let table = ScoreTable::from_distances(dim, checksum, rows)?;
        stored_scores.sort_by_key(|s| s.0);
        for w in stored_scores.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(bad(w[1].2, format!("duplicate annotation id {}", w[1].0)));
            }
        }
        for (rec, (_, s, n)) in table.records.iter().zip(&stored_scores) {
            if (rec.score - s).abs() > 1e-9 {
                return Err(bad(
                    *n,
                    format!(
                        "score {s} inconsistent with its distance (expected {})",
                        rec.score
                    ),
                ));
            }
        }
        Ok(table)
    }
}

/// Distances and normalized scores for every archive entry.
pub fn score_dataset(
    model: &ClassConditionalGaussian,
    archive: &FeatureArchive,
) -> Result<ScoreTable> {
    model.check_dim(archive.dim)?;
    let unfitted: Vec<CategoryId> = archive
        .per_class_counts()
        .into_keys()
        .filter(|c| !model.means().contains_key(c))
        .collect();
    if !unfitted.is_empty() {
        return Err(Error::UnfittedClasses(unfitted));
    }
    let entries: Vec<_> = archive.entries.values().collect();
    let rows = entries
        .par_iter()
        .map(|e| {
            model
                .mahalanobis(&e.vector, e.category_id)
                .map(|m| (e.annotation_id, e.category_id, m))
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreTable::from_distances(archive.dim, model.checksum(), rows)
}

pub fn write_scores(table: &ScoreTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    table
        .write_to(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ScoreTable::read_from(BufReader::new(file))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HistogramScope {
    Global,
    PerClass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramReport {
    pub bins: usize,
    /// Counts over all records, or one row per class.
    pub rows: Vec<(Option<CategoryId>, Vec<u64>)>,
}

/// Bin index for a score over equal-width bins of `[0, 1]`; every bin is
/// `[lo, hi)` except the last, which is closed.
pub fn histogram_bin(score: f64, bins: usize) -> usize {
    let b = bins as f64;
    let mut i = ((score * b).floor().max(0.0) as usize).min(bins - 1);
    if i > 0 && score < i as f64 / b {
        i -= 1;
    } else if i + 1 < bins && score >= (i + 1) as f64 / b {
        i += 1;
    }
    i
}

pub fn histogram(
    table: &ScoreTable,
    bins: usize,
    scope: HistogramScope,
) -> Result<HistogramReport> {
    if bins == 0 {
        return Err(Error::InvalidParameter(
            "histogram needs at least one bin".into(),
        ));
    }
    let rows = match scope {
        HistogramScope::Global => {
            let mut counts = vec![0u64; bins];
            for r in &table.records {
                counts[histogram_bin(r.score, bins)] += 1;
            }
            vec![(None, counts)]
        }
        HistogramScope::PerClass => {
            let mut per: BTreeMap<CategoryId, Vec<u64>> =
                table.categories().map(|c| (c, vec![0u64; bins])).collect();
            for r in &table.records {
                per.entry(r.category_id).or_insert_with(|| vec![0; bins])
                    [histogram_bin(r.score, bins)] += 1;
            }
            per.into_iter().map(|(c, v)| (Some(c), v)).collect()
        }
    };
    Ok(HistogramReport { bins, rows })
}

impl HistogramReport {
    pub fn total(&self) -> u64 {
        self.rows.iter().flat_map(|(_, c)| c).sum()
    }

    pub fn edges(&self, i: usize) -> (f64, f64) {
        let b = self.bins as f64;
        (i as f64 / b, (i + 1) as f64 / b)
    }

    pub fn to_csv(&self) -> String {
        let per_class = self.rows.iter().any(|(c, _)| c.is_some());
        let mut out = String::from(if per_class {
            "bin_lo,bin_hi,count,category_id\n"
        } else {
            "bin_lo,bin_hi,count\n"
        });
        for (cat, counts) in &self.rows {
            for (i, n) in counts.iter().enumerate() {
                let (lo, hi) = self.edges(i);
                match cat {
                    Some(c) => writeln!(out, "{lo},{hi},{n},{c}").unwrap(),
                    None => writeln!(out, "{lo},{hi},{n}").unwrap(),
                }
            }
        }
        out
    }

    /// Bar charts, one panel per row, stacked vertically.
    pub fn to_svg(&self) -> String {
        const W: f64 = 480.0;
        const H: f64 = 160.0;
        const PAD: f64 = 30.0;
        let panel = H + PAD;
        let height = panel * self.rows.len().max(1) as f64 + PAD;
        let mut out = String::new();
        writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="11">"#,
            W + 2.0 * PAD
        )
        .unwrap();
        for (p, (cat, counts)) in self.rows.iter().enumerate() {
            let top = PAD + p as f64 * panel;
            let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
            let bar_w = W / self.bins as f64;
            let title = match cat {
                Some(c) => format!("category {c}"),
                None => "all categories".to_string(),
            };
            writeln!(
                out,
                r#"<text x="{PAD}" y="{}">{title} (n={})</text>"#,
                top - 6.0,
                counts.iter().sum::<u64>()
            )
            .unwrap();
            writeln!(
                out,
                r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
                top + H,
                PAD + W,
                top + H
            )
            .unwrap();
            for (i, &n) in counts.iter().enumerate() {
                let h = H * n as f64 / max;
                writeln!(
                    out,
                    r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a78b5"/>"##,
                    PAD + i as f64 * bar_w,
                    top + H - h,
                    (bar_w - 1.0).max(0.5),
                    h
                )
                .unwrap();
            }
            for (x, label) in [(PAD, "0"), (PAD + W / 2.0, "0.5"), (PAD + W, "1")] {
                writeln!(
                    out,
                    r#"<text x="{x}" y="{}" text-anchor="middle">{label}</text>"#,
                    top + H + 13.0
                )
                .unwrap();
            }
        }
        out.push_str("</svg>\n");
        out
    }
}
