//! Score-based annotation filters.
//!
//! Noise filters keep every object whose score is at most the empirical
//! `p`-quantile `inf { d : F(d) >= p }` (no interpolation), computed either
//! over all classes or within each class. The redundancy filter splits each
//! class into `M` score bins `((m-1)/M, m/M]` and drops `floor(p * |bin|)`
//! objects from every bin, chosen by a generator seeded from
//! `(seed, category, bin)`.
//!
//! Filter file:
//!
//! ```text
//! uq-filter v1 strategy=<s> p=<p> M=<M> seed=<n>
//! # provenance lines
//! [kept]
//! <annotation_id> ...
//! [dropped]
//! <annotation_id> ...
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dataset::{AnnotationId, CategoryId, DatasetIndex, ImageId};
use crate::error::{Error, Result};
use crate::scoring::ScoreTable;

/// Smallest observed value `d` with `#{x <= d} / n >= p`.
pub fn empirical_quantile(scores: &[f64], p: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("quantile of an empty score list"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "quantile level {p} outside [0, 1]"
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(quantile_sorted(&sorted, p))
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len() as f64;
    // F(sorted[i]) >= (i + 1) / n, with equality at the last copy of a tie,
    // so the first index reaching p gives the infimum.
    let i = (0..sorted.len())
        .find(|&i| (i + 1) as f64 / n >= p)
        .unwrap_or(sorted.len() - 1);
    sorted[i]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FilterStrategy {
    NoiseGlobal,
    NoisePerClass,
    Redundancy,
}

impl fmt::Display for FilterStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterStrategy::NoiseGlobal => "noise_global",
            FilterStrategy::NoisePerClass => "noise_per_class",
            FilterStrategy::Redundancy => "redundancy",
        })
    }
}

impl FromStr for FilterStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise_global" => Ok(FilterStrategy::NoiseGlobal),
            "noise_per_class" => Ok(FilterStrategy::NoisePerClass),
            "redundancy" => Ok(FilterStrategy::Redundancy),
            other => Err(Error::InvalidParameter(format!(
                "unknown filter strategy `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassThreshold {
    pub threshold: f64,
    pub count: usize,
    pub kept: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinCount {
    pub category_id: CategoryId,
    /// 1-based bin index.
    pub bin: u32,
    pub size: usize,
    pub dropped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Global { threshold: f64 },
    PerClass(BTreeMap<CategoryId, ClassThreshold>),
    Bins(Vec<BinCount>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterResult {
    pub strategy: FilterStrategy,
    pub p: f64,
    pub bins: Option<u32>,
    pub seed: Option<u64>,
    pub kept: BTreeSet<AnnotationId>,
    pub dropped: BTreeSet<AnnotationId>,
    pub provenance: Provenance,
}

fn check_noise_p(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "noise-filter quantile p = {p} must lie in (0, 1]"
        )))
    }
}

fn split_by_threshold<'a>(
    records: impl Iterator<Item = &'a crate::scoring::ScoreRecord>,
    threshold: f64,
    kept: &mut BTreeSet<AnnotationId>,
    dropped: &mut BTreeSet<AnnotationId>,
) -> usize {
    let mut n = 0;
    for r in records {
        if r.score <= threshold {
            kept.insert(r.annotation_id);
            n += 1;
        } else {
            dropped.insert(r.annotation_id);
        }
    }
    n
}

/// Keeps scores at or below the `p`-quantile of all scores pooled.
pub fn filter_noise_global(table: &ScoreTable, p: f64) -> Result<FilterResult> {
    check_noise_p(p)?;
    let scores: Vec<f64> = table.records.iter().map(|r| r.score).collect();
    let threshold = empirical_quantile(&scores, p)?;
    let mut kept = BTreeSet::new();
    let mut dropped = BTreeSet::new();
    split_by_threshold(table.records.iter(), threshold, &mut kept, &mut dropped);
    Ok(FilterResult {
        strategy: FilterStrategy::NoiseGlobal,
        p,
        bins: None,
        seed: None,
        kept,
        dropped,
        provenance: Provenance::Global { threshold },
    })
}

/// Like [`filter_noise_global`] with a separate quantile per class.
pub fn filter_noise_per_class(table: &ScoreTable, p: f64) -> Result<FilterResult> {
    check_noise_p(p)?;
    if table.records.is_empty() {
        return Err(Error::Empty("score table has no records"));
    }
    let mut by_class: BTreeMap<CategoryId, Vec<f64>> = BTreeMap::new();
    for r in &table.records {
        by_class.entry(r.category_id).or_default().push(r.score);
    }
    let mut kept = BTreeSet::new();
    let mut dropped = BTreeSet::new();
    let mut thresholds = BTreeMap::new();
    for (cat, scores) in by_class {
        let threshold = empirical_quantile(&scores, p)?;
        let n_kept =
            split_by_threshold(table.class_records(cat), threshold, &mut kept, &mut dropped);
        thresholds.insert(
            cat,
            ClassThreshold {
                threshold,
                count: scores.len(),
                kept: n_kept,
            },
        );
    }
    Ok(FilterResult {
        strategy: FilterStrategy::NoisePerClass,
        p,
        bins: None,
        seed: None,
        kept,
        dropped,
        provenance: Provenance::PerClass(thresholds),
    })
}

/// 1-based bin `m` with `score` in `((m-1)/M, m/M]`; a score of 0 goes to bin 1.
pub fn redundancy_bin(score: f64, bins: u32) -> u32 {
    let b = f64::from(bins);
    let mut m = ((score * b).ceil().max(1.0) as u32).min(bins);
    if m > 1 && score <= f64::from(m - 1) / b {
        m -= 1;
    } else if m < bins && score > f64::from(m) / b {
        m += 1;
    }
    m
}

/// Generator for one `(class, bin)` cell, independent of visiting order.
pub fn bin_rng(seed: u64, category: CategoryId, bin: u32) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"uqcurate-redundancy");
    h.update(seed.to_le_bytes());
    h.update(category.0.to_le_bytes());
    h.update(bin.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Drops `floor(p * |B|)` uniformly chosen records from every `(class, bin)` cell.
pub fn filter_redundant(table: &ScoreTable, bins: u32, p: f64, seed: u64) -> Result<FilterResult> {
    if bins == 0 {
        return Err(Error::InvalidParameter(
            "bin count must be at least 1".into(),
        ));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "drop fraction p = {p} must lie in [0, 1)"
        )));
    }
    if table.records.is_empty() {
        return Err(Error::Empty("score table has no records"));
    }
    // Records are sorted by annotation id, so members are too.
    let mut cells: BTreeMap<(CategoryId, u32), Vec<AnnotationId>> = BTreeMap::new();
    for r in &table.records {
        cells
            .entry((r.category_id, redundancy_bin(r.score, bins)))
            .or_default()
            .push(r.annotation_id);
    }
    let mut kept = BTreeSet::new();
    let mut dropped = BTreeSet::new();
    let mut counts = Vec::with_capacity(cells.len());
    for ((cat, bin), members) in cells {
        let n_drop = (p * members.len() as f64).floor() as usize;
        let mut rng = bin_rng(seed, cat, bin);
        let chosen: BTreeSet<usize> = rand::seq::index::sample(&mut rng, members.len(), n_drop)
            .into_iter()
            .collect();
        for (i, id) in members.iter().enumerate() {
            if chosen.contains(&i) {
                dropped.insert(*id);
            } else {
                kept.insert(*id);
            }
        }
        counts.push(BinCount {
            category_id: cat,
            bin,
            size: members.len(),
            dropped: n_drop,
        });
    }
    Ok(FilterResult {
        strategy: FilterStrategy::Redundancy,
        p,
        bins: Some(bins),
        seed: Some(seed),
        kept,
        dropped,
        provenance: Provenance::Bins(counts),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ApplyOptions {
    pub drop_empty_images: bool,
    /// Keep annotations the filter never saw (crowd regions, zero-area boxes).
    pub keep_unscored: bool,
}

impl Default for ApplyOptions {
    fn default() -> Self {
        ApplyOptions {
            drop_empty_images: false,
            keep_unscored: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApplyReport {
    pub kept: usize,
    pub dropped: usize,
    pub unscored_kept: usize,
    pub unscored_removed: usize,
    pub images_removed: usize,
}

/// Materializes the filtered dataset.
pub fn apply_filter(
    index: &DatasetIndex,
    result: &FilterResult,
    options: ApplyOptions,
) -> Result<(DatasetIndex, ApplyReport)> {
    let known: BTreeSet<AnnotationId> = index.annotations.iter().map(|a| a.id).collect();
    let unknown: Vec<AnnotationId> = result
        .kept
        .iter()
        .chain(&result.dropped)
        .filter(|id| !known.contains(id))
        .copied()
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownAnnotations(unknown));
    }
    let mut report = ApplyReport::default();
    let mut out = index.clone();
    out.annotations.retain(|a| {
        if result.kept.contains(&a.id) {
            report.kept += 1;
            true
        } else if result.dropped.contains(&a.id) {
            report.dropped += 1;
            false
        } else if options.keep_unscored {
            report.unscored_kept += 1;
            true
        } else {
            report.unscored_removed += 1;
            false
        }
    });
    if options.drop_empty_images {
        let used: BTreeSet<ImageId> = out.annotations.iter().map(|a| a.image_id).collect();
        let before = out.images.len();
        out.images.retain(|im| used.contains(&im.id));
        report.images_removed = before - out.images.len();
    }
    log::info!(
        "filter applied: {} kept, {} dropped, {} unscored kept, {} images removed",
        report.kept,
        report.dropped,
        report.unscored_kept,
        report.images_removed
    );
    Ok((out, report))
}

impl FilterResult {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        writeln!(
            w,
            "uq-filter v1 strategy={} p={:?} M={} seed={}",
            self.strategy,
            self.p,
            opt(self.bins.map(|b| b.to_string())),
            opt(self.seed.map(|s| s.to_string()))
        )?;
        match &self.provenance {
            Provenance::Global { threshold } => writeln!(w, "# threshold {threshold:?}")?,
            Provenance::PerClass(t) => {
                for (cat, c) in t {
                    writeln!(
                        w,
                        "# class {cat} threshold {:?} count {} kept {}",
                        c.threshold, c.count, c.kept
                    )?;
                }
            }
            Provenance::Bins(bins) => {
                for b in bins {
                    writeln!(
                        w,
                        "# bin {} {} size {} dropped {}",
                        b.category_id, b.bin, b.size, b.dropped
                    )?;
                }
            }
        }
        writeln!(w, "[kept]")?;
        for id in &self.kept {
            writeln!(w, "{id}")?;
        }
        writeln!(w, "[dropped]")?;
        for id in &self.dropped {
            writeln!(w, "{id}")?;
        }
        Ok(())
    }

    pub fn read_from(reader: impl BufRead) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse { line, message };
        let mut lines = reader.lines().enumerate();
        let header = match lines.next() {
            Some((_, l)) => l.map_err(|e| bad(1, e.to_string()))?,
            None => return Err(bad(1, "missing header".into())),
        };
        let mut fields = header.split_whitespace();
        if fields.next() != Some("uq-filter") || fields.next() != Some("v1") {
            return Err(bad(
                1,
                format!("expected `uq-filter v1` header, got `{header}`"),
            ));
        }
        let (mut strategy, mut p, mut bins, mut seed) = (None, None, None, None);
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| bad(1, format!("bad header field `{f}`")))?;
            let parsed = match k {
                "strategy" => v.parse().ok().map(|s| strategy = Some(s)),
                "p" => v.parse().ok().map(|x| p = Some(x)),
                "M" => (v == "-")
                    .then_some(())
                    .or_else(|| v.parse().ok().map(|x| bins = Some(x))),
                "seed" => (v == "-")
                    .then_some(())
                    .or_else(|| v.parse().ok().map(|x| seed = Some(x))),
                _ => None,
            };
            if parsed.is_none() {
                return Err(bad(1, format!("bad header field `{f}`")));
            }
        }
        let (Some(strategy), Some(p)) = (strategy, p) else {
            return Err(bad(1, "header needs strategy=<s> and p=<p>".into()));
        };

        let mut threshold = None;
        let mut per_class = BTreeMap::new();
        let mut bin_counts = Vec::new();
        let mut kept = BTreeSet::new();
        let mut dropped = BTreeSet::new();
        let mut section: Option<bool> = None;
        for (i, line) in lines {
            let n = i + 1;
            let line = line.map_err(|e| bad(n, e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let t: Vec<&str> = rest.split_whitespace().collect();
                let num = |s: &str| {
                    s.parse::<f64>()
                        .map_err(|_| bad(n, format!("bad number `{s}`")))
                };
                let int = |s: &str| {
                    s.parse::<u64>()
                        .map_err(|_| bad(n, format!("bad integer `{s}`")))
                };
                match t.as_slice() {
                    ["threshold", v] => threshold = Some(num(v)?),
                    ["class", c, "threshold", v, "count", cnt, "kept", k] => {
                        per_class.insert(
                            CategoryId(int(c)? as u32),
                            ClassThreshold {
                                threshold: num(v)?,
                                count: int(cnt)? as usize,
                                kept: int(k)? as usize,
                            },
                        );
                    }
                    ["bin", c, b, "size", s, "dropped", d] => bin_counts.push(BinCount {
                        category_id: CategoryId(int(c)? as u32),
                        bin: int(b)? as u32,
                        size: int(s)? as usize,
                        dropped: int(d)? as usize,
                    }),
                    _ => {}
                }
                continue;
            }
            match line {
                "[kept]" => section = Some(true),
                "[dropped]" => section = Some(false),
                id => {
                    let id = AnnotationId(
                        id.parse()
                            .map_err(|_| bad(n, format!("bad annotation id `{id}`")))?,
                    );
                    let fresh = match section {
                        Some(true) => kept.insert(id),
                        Some(false) => dropped.insert(id),
                        None => return Err(bad(n, "annotation id before a section marker".into())),
                    };
                    if !fresh {
                        return Err(bad(n, format!("duplicate annotation id {id}")));
                    }
                }
            }
        }
        if let Some(id) = kept.intersection(&dropped).next() {
            return Err(Error::Invalid(format!(
                "annotation {id} is both kept and dropped"
            )));
        }
        let provenance = match strategy {
            FilterStrategy::NoiseGlobal => Provenance::Global {
                threshold: threshold
                    .ok_or_else(|| bad(1, "missing threshold provenance".into()))?,
            },
            FilterStrategy::NoisePerClass => Provenance::PerClass(per_class),
            FilterStrategy::Redundancy => Provenance::Bins(bin_counts),
        };
        Ok(FilterResult {
            strategy,
            p,
            bins,
            seed,
            kept,
            dropped,
            provenance,
        })
    }
}

pub fn write_filter(result: &FilterResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    result
        .write_to(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_filter(path: impl AsRef<Path>) -> Result<FilterResult> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    FilterResult::read_from(BufReader::new(file))
}
