#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use uqcurate::features::{FeatureArchive, PoolMode, PooledFeature};
use uqcurate::scoring::ScoreTable;
use uqcurate::{AnnotationId, CategoryId};

/// Archive of `n` Gaussian vectors spread over `classes` classes, each
/// class offset by a random mean.
pub fn random_archive(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: u32) -> FeatureArchive {
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let mut archive = FeatureArchive::new(dim, "test");
    for i in 0..n {
        let k = (i as u32) % classes;
        let vector = means[k as usize]
            .iter()
            .map(|m| (m + rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        archive
            .insert(PooledFeature {
                annotation_id: AnnotationId(i as u64 + 1),
                category_id: CategoryId(k + 1),
                vector,
                pool_mode: PoolMode::BoxMean,
            })
            .unwrap();
    }
    archive
}

/// Per-class mean and tied covariance computed entry by entry, straight
/// from the definition.
pub fn naive_fit(archive: &FeatureArchive) -> (BTreeMap<CategoryId, Vec<f64>>, Vec<f64>) {
    let dim = archive.dim;
    let mut means: BTreeMap<CategoryId, Vec<f64>> = BTreeMap::new();
    for cat in archive.per_class_counts().keys() {
        let members: Vec<&PooledFeature> = archive
            .entries
            .values()
            .filter(|e| e.category_id == *cat)
            .collect();
        let mut mu = vec![0.0; dim];
        for (j, m) in mu.iter_mut().enumerate() {
            let mut s = 0.0;
            for e in &members {
                s += f64::from(e.vector[j]);
            }
            *m = s / members.len() as f64;
        }
        means.insert(*cat, mu);
    }
    let n = archive.len() as f64;
    let mut cov = vec![0.0; dim * dim];
    for a in 0..dim {
        for b in 0..dim {
            let mut s = 0.0;
            for e in archive.entries.values() {
                let mu = &means[&e.category_id];
                s += (f64::from(e.vector[a]) - mu[a]) * (f64::from(e.vector[b]) - mu[b]);
            }
            cov[a * dim + b] = s / n;
        }
    }
    (means, cov)
}

/// Single-class table with distinct distances drawn uniformly from `[1, 100)`.
pub fn random_table(rng: &mut ChaCha8Rng, n: usize, classes: u32) -> ScoreTable {
    let rows = (0..n)
        .map(|i| {
            let cat = CategoryId((i as u32) % classes + 1);
            (
                AnnotationId(i as u64 + 1),
                cat,
                rng.random_range(1.0..100.0),
            )
        })
        .collect();
    ScoreTable::from_distances(4, 0, rows).unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
