//! Synthetic archives with injected feature-space outliers, used to check
//! that the scoring pipeline ranks the outliers highest.
//!
//! Clean vectors for class `k` are `mu_k + z` with `z ~ N(0, I)`. Outliers
//! are clean draws pushed `outlier_shift` standard deviations along a
//! uniformly random direction. With `K <= dim` the class means are
//! `(separation / sqrt 2) e_k`, so every pair of means sits exactly
//! `separation` apart.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    AnnotationId, BBox, Category, CategoryId, CategoryTable, DatasetIndex, ImageId, ImageRecord,
    ObjectAnnotation,
};
use crate::density::{ClassConditionalGaussian, Regularization};
use crate::error::{Error, Result};
use crate::features::{FeatureArchive, PoolMode, PooledFeature};
use crate::filtering::filter_noise_global;
use crate::scoring::{score_dataset, ScoreTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub mean_separation: f64,
    pub contamination: f64,
    pub outlier_shift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            dim: 16,
            per_class: 2000,
            mean_separation: 8.0,
            contamination: 0.05,
            outlier_shift: 6.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dim == 0 || self.per_class == 0 {
            return Err(Error::InvalidParameter(
                "classes, dim and per-class count must all be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.contamination) {
            return Err(Error::InvalidParameter(format!(
                "contamination {} must lie in [0, 1)",
                self.contamination
            )));
        }
        if !self.mean_separation.is_finite() || !self.outlier_shift.is_finite() {
            return Err(Error::InvalidParameter(
                "separation and shift must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Outliers injected into each class.
    pub fn outliers_per_class(&self) -> usize {
        ((self.contamination * self.per_class as f64).round() as usize).min(self.per_class)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Clean,
    Outlier,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthTruth {
    pub labels: BTreeMap<AnnotationId, Label>,
}

impl SynthTruth {
    pub fn outliers(&self) -> impl Iterator<Item = AnnotationId> + '_ {
        self.labels
            .iter()
            .filter(|(_, l)| **l == Label::Outlier)
            .map(|(id, _)| *id)
    }

    pub fn outlier_count(&self) -> usize {
        self.outliers().count()
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub archive: FeatureArchive,
    pub index: DatasetIndex,
    pub truth: SynthTruth,
    pub class_means: BTreeMap<CategoryId, Vec<f64>>,
}

const PER_IMAGE: usize = 8;

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let radius = config.mean_separation / std::f64::consts::SQRT_2;
    let mut class_means = BTreeMap::new();
    for k in 0..config.classes {
        let mean: Vec<f64> = if config.classes <= config.dim {
            (0..config.dim)
                .map(|i| if i == k { radius } else { 0.0 })
                .collect()
        } else {
            unit_direction(&mut rng, config.dim)
                .into_iter()
                .map(|x| x * radius)
                .collect()
        };
        class_means.insert(CategoryId(k as u32 + 1), mean);
    }

    let n_out = config.outliers_per_class();
    let mut archive = FeatureArchive::new(config.dim, format!("synth seed={}", config.seed));
    let mut truth = SynthTruth::default();
    let mut annotations = Vec::with_capacity(config.classes * config.per_class);
    let mut next_id = 1u64;
    for (cat, mean) in &class_means {
        let outliers: std::collections::BTreeSet<usize> =
            index::sample(&mut rng, config.per_class, n_out)
                .into_iter()
                .collect();
        for i in 0..config.per_class {
            let mut v: Vec<f64> = mean
                .iter()
                .map(|m| {
                    m + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
                .collect();
            let label = if outliers.contains(&i) {
                let u = unit_direction(&mut rng, config.dim);
                v.iter_mut()
                    .zip(u)
                    .for_each(|(x, d)| *x += config.outlier_shift * d);
                Label::Outlier
            } else {
                Label::Clean
            };
            let id = AnnotationId(next_id);
            let slot = (next_id - 1) as usize;
            next_id += 1;
            archive.insert(PooledFeature {
                annotation_id: id,
                category_id: *cat,
                vector: v.iter().map(|x| *x as f32).collect(),
                pool_mode: PoolMode::BoxMean,
            })?;
            truth.labels.insert(id, label);
            let col = (slot % PER_IMAGE) as f64;
            annotations.push(ObjectAnnotation {
                id,
                image_id: ImageId((slot / PER_IMAGE) as u64 + 1),
                category_id: *cat,
                bbox: BBox::new(10.0 + 70.0 * col, 40.0, 60.0, 60.0),
                segmentation: None,
                area: Some(3600.0),
                iscrowd: 0,
                extra: Default::default(),
            });
        }
    }
    let n_images = annotations.len().div_ceil(PER_IMAGE);
    let images = (0..n_images)
        .map(|i| ImageRecord {
            id: ImageId(i as u64 + 1),
            width: 640,
            height: 160,
            file_name: format!("synth_{:06}.png", i + 1),
            extra: Default::default(),
        })
        .collect();
    let categories = CategoryTable::new(
        class_means
            .keys()
            .map(|c| Category {
                id: *c,
                name: format!("class_{c}"),
                supercategory: None,
                extra: Default::default(),
            })
            .collect(),
    )?;
    let index = DatasetIndex {
        info: None,
        licenses: None,
        images,
        annotations,
        categories,
        extra: Default::default(),
    };
    Ok(SynthData {
        archive,
        index,
        truth,
        class_means,
    })
}

/// Probability that a random positive outranks a random negative, with ties
/// counted as one half (average ranks).
pub fn auroc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Empty(
            "AUROC needs at least one positive and one negative",
        ));
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// AUROC of the score as an outlier detector.
pub fn evaluate_auroc(table: &ScoreTable, truth: &SynthTruth) -> Result<f64> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut missing = Vec::new();
    for r in &table.records {
        match truth.labels.get(&r.annotation_id) {
            Some(Label::Outlier) => pos.push(r.score),
            Some(Label::Clean) => neg.push(r.score),
            None => missing.push(r.annotation_id),
        }
    }
    if !missing.is_empty() || table.records.len() != truth.labels.len() {
        if missing.is_empty() {
            let scored: std::collections::BTreeSet<_> =
                table.records.iter().map(|r| r.annotation_id).collect();
            missing = truth
                .labels
                .keys()
                .filter(|id| !scored.contains(id))
                .copied()
                .collect();
        }
        return Err(Error::UnknownAnnotations(missing));
    }
    auroc(&pos, &neg)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub config: SynthConfig,
    pub objects: usize,
    pub outliers: usize,
    /// `None` when there are no outliers.
    pub auroc: Option<f64>,
    pub filter_p: f64,
    pub threshold: f64,
    pub dropped_outliers: usize,
    pub dropped_clean: usize,
    pub kept_outliers: usize,
    pub kept_clean: usize,
}

impl RecoveryReport {
    /// Share of injected outliers that the noise filter dropped.
    pub fn outlier_recall(&self) -> Option<f64> {
        (self.outliers > 0).then(|| self.dropped_outliers as f64 / self.outliers as f64)
    }

    pub fn to_csv(&self) -> String {
        let c = &self.config;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let rows: Vec<(&str, String)> = vec![
            ("classes", c.classes.to_string()),
            ("dim", c.dim.to_string()),
            ("per_class", c.per_class.to_string()),
            ("mean_separation", c.mean_separation.to_string()),
            ("contamination", c.contamination.to_string()),
            ("outlier_shift", c.outlier_shift.to_string()),
            ("seed", c.seed.to_string()),
            ("objects", self.objects.to_string()),
            ("outliers", self.outliers.to_string()),
            ("auroc", opt(self.auroc)),
            ("filter_p", self.filter_p.to_string()),
            ("threshold", self.threshold.to_string()),
            ("dropped_outliers", self.dropped_outliers.to_string()),
            ("dropped_clean", self.dropped_clean.to_string()),
            ("kept_outliers", self.kept_outliers.to_string()),
            ("kept_clean", self.kept_clean.to_string()),
            ("outlier_recall", opt(self.outlier_recall())),
        ];
        let mut out = String::from("metric,value\n");
        for (k, v) in rows {
            out.push_str(k);
            out.push(',');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

/// Generate, fit, score, then filter at `p = 1 - contamination`.
pub fn recovery_experiment(config: &SynthConfig) -> Result<RecoveryReport> {
    let data = generate(config)?;
    let model = ClassConditionalGaussian::fit(&data.archive, Regularization::Auto)?;
    let table = score_dataset(&model, &data.archive)?;
    let outliers = data.truth.outlier_count();
    let auroc = if outliers > 0 && outliers < table.records.len() {
        Some(evaluate_auroc(&table, &data.truth)?)
    } else {
        None
    };
    let filter_p = 1.0 - config.contamination;
    let result = filter_noise_global(&table, filter_p)?;
    let threshold = match result.provenance {
        crate::filtering::Provenance::Global { threshold } => threshold,
        _ => unreachable!("global filter records a single threshold"),
    };
    let is_outlier = |id: &AnnotationId| data.truth.labels.get(id) == Some(&Label::Outlier);
    let dropped_outliers = result.dropped.iter().filter(|id| is_outlier(id)).count();
    let kept_outliers = result.kept.iter().filter(|id| is_outlier(id)).count();
    Ok(RecoveryReport {
        config: config.clone(),
        objects: table.records.len(),
        outliers,
        auroc,
        filter_p,
        threshold,
        dropped_outliers,
        dropped_clean: result.dropped.len() - dropped_outliers,
        kept_outliers,
        kept_clean: result.kept.len() - kept_outliers,
    })
}
