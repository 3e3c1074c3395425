//! Class-conditional Gaussians with one shared covariance.
//!
//! Each class `k` gets its own mean; the covariance is the pooled
//! within-class scatter divided by the total object count. Distances are
//! the positive quadratic form `(v - mu_k)^T (Sigma + eps I)^{-1} (v - mu_k)`,
//! evaluated with a triangular solve against the Cholesky factor.
//!
//! Model file (little-endian):
//!
//! ```text
//! b"UQGM0001" | u32 dim | u32 classes | f64 eps
//!   | classes * (u32 category_id | u64 count | f64 * dim mean)
//!   | f64 * dim*dim covariance | u64 checksum
//! ```
//!
//! The checksum is the first 8 bytes (little-endian) of the SHA-256 of
//! everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dataset::CategoryId;
use crate::error::{Error, Result};
use crate::features::FeatureArchive;
use crate::linalg::Cholesky;

pub const MODEL_MAGIC: &[u8; 8] = b"UQGM0001";

/// Ridge added to the covariance before factorization.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Regularization {
    /// `max(1e-6 * trace / dim, 1e-12)`.
    #[default]
    Auto,
    Fixed(f64),
}

impl Regularization {
    pub fn resolve(self, covariance: &[f64], dim: usize) -> f64 {
        match self {
            Regularization::Auto => {
                let trace: f64 = (0..dim).map(|i| covariance[i * dim + i]).sum();
                (1e-6 * trace / dim as f64).max(1e-12)
            }
            Regularization::Fixed(eps) => eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassConditionalGaussian {
    dim: usize,
    means: BTreeMap<CategoryId, Vec<f64>>,
    counts: BTreeMap<CategoryId, u64>,
    /// Row-major, unregularized.
    covariance: Vec<f64>,
    eps: f64,
    factor: Cholesky,
}

impl ClassConditionalGaussian {
    /// Fits on every archive entry, visiting entries in ascending annotation id.
    pub fn fit(archive: &FeatureArchive, reg: Regularization) -> Result<Self> {
        let rows = || {
            archive
                .entries
                .values()
                .map(|e| (e.category_id, e.vector.as_slice()))
        };
        Self::fit_rows(archive.dim, rows, reg)
    }

    /// Fits on `(category, vector)` samples in the given order.
    pub fn fit_samples(
        dim: usize,
        samples: &[(CategoryId, Vec<f64>)],
        reg: Regularization,
    ) -> Result<Self> {
        Self::fit_rows(dim, || samples.iter().map(|(c, v)| (*c, v.as_slice())), reg)
    }

    /// Two passes over the rows: class means first, then the pooled scatter.
    /// Summation order is the row order, so fits are bit-reproducible.
    pub fn fit_rows<'a, T, I, F>(dim: usize, rows: F, reg: Regularization) -> Result<Self>
    where
        T: Copy + Into<f64> + 'a,
        I: Iterator<Item = (CategoryId, &'a [T])>,
        F: Fn() -> I,
    {
        if dim == 0 {
            return Err(Error::Invalid("feature dimension is zero".into()));
        }
        let mut sums: BTreeMap<CategoryId, Vec<f64>> = BTreeMap::new();
        let mut counts: BTreeMap<CategoryId, u64> = BTreeMap::new();
        for (cat, v) in rows() {
            if v.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    found: v.len(),
                });
            }
            let acc = sums.entry(cat).or_insert_with(|| vec![0.0; dim]);
            for (a, x) in acc.iter_mut().zip(v) {
                *a += (*x).into();
            }
            *counts.entry(cat).or_default() += 1;
        }
        let total: u64 = counts.values().sum();
        if total == 0 {
            return Err(Error::Empty("cannot fit a model on zero vectors"));
        }
        let means: BTreeMap<CategoryId, Vec<f64>> = sums
            .into_iter()
            .map(|(cat, mut s)| {
                let n = counts[&cat] as f64;
                s.iter_mut().for_each(|x| *x /= n);
                (cat, s)
            })
            .collect();

        // Upper triangle of the scatter, one rank-1 update per row.
        let mut scatter = vec![0.0; dim * dim];
        let mut centered = vec![0.0; dim];
        for (cat, v) in rows() {
            let mu = &means[&cat];
            for ((c, x), m) in centered.iter_mut().zip(v).zip(mu) {
                *c = (*x).into() - m;
            }
            for i in 0..dim {
                let ci = centered[i];
                let row = &mut scatter[i * dim + i..(i + 1) * dim];
                for (s, cj) in row.iter_mut().zip(&centered[i..]) {
                    *s += ci * cj;
                }
            }
        }
        let n = total as f64;
        let mut covariance = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in i..dim {
                let c = scatter[i * dim + j] / n;
                covariance[i * dim + j] = c;
                covariance[j * dim + i] = c;
            }
        }
        let eps = reg.resolve(&covariance, dim);
        Self::from_parts(dim, means, counts, covariance, eps)
    }

    /// Assembles a model from fitted statistics and factors `Sigma + eps I`.
    pub fn from_parts(
        dim: usize,
        means: BTreeMap<CategoryId, Vec<f64>>,
        counts: BTreeMap<CategoryId, u64>,
        covariance: Vec<f64>,
        eps: f64,
    ) -> Result<Self> {
        if covariance.len() != dim * dim {
            return Err(Error::Dimension {
                expected: dim * dim,
                found: covariance.len(),
            });
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "regularization eps {eps} must be finite and >= 0"
            )));
        }
        for (cat, m) in &means {
            if m.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    found: m.len(),
                });
            }
            if counts.get(cat).copied().unwrap_or(0) == 0 {
                return Err(Error::Invalid(format!("class {cat} has no samples")));
            }
        }
        let mut regularized = covariance.clone();
        for i in 0..dim {
            regularized[i * dim + i] += eps;
        }
        let factor = Cholesky::factor(&regularized, dim).map_err(|e| Error::SingularModel {
            eps,
            index: e.index,
            pivot: e.pivot,
            min_eigen_estimate: gershgorin_lower_bound(&regularized, dim).min(e.pivot),
        })?;
        Ok(ClassConditionalGaussian {
            dim,
            means,
            counts,
            covariance,
            eps,
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn means(&self) -> &BTreeMap<CategoryId, Vec<f64>> {
        &self.means
    }

    pub fn counts(&self) -> &BTreeMap<CategoryId, u64> {
        &self.counts
    }

    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }

    pub fn factor(&self) -> &Cholesky {
        &self.factor
    }

    pub fn classes(&self) -> impl Iterator<Item = CategoryId> + '_ {
        self.means.keys().copied()
    }

    /// `(Sigma + eps I)^{-1}`, row-major.
    pub fn precision(&self) -> Vec<f64> {
        self.factor.inverse()
    }

    pub fn mean(&self, cat: CategoryId) -> Result<&[f64]> {
        self.means
            .get(&cat)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnfittedClasses(vec![cat]))
    }

    /// Squared Mahalanobis distance of `v` to the class mean. Zero exactly at
    /// the centroid.
    pub fn mahalanobis<T: Copy + Into<f64>>(&self, v: &[T], cat: CategoryId) -> Result<f64> {
        let mu = self.mean(cat)?;
        if v.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: v.len(),
            });
        }
        let mut r: Vec<f64> = v.iter().zip(mu).map(|(x, m)| (*x).into() - m).collect();
        self.factor.solve_lower_in_place(&mut r);
        Ok(r.iter().map(|y| y * y).sum())
    }

    /// Natural-log Gaussian density of `v` under class `cat`.
    pub fn log_density<T: Copy + Into<f64>>(&self, v: &[T], cat: CategoryId) -> Result<f64> {
        let m = self.mahalanobis(v, cat)?;
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        Ok(-0.5 * (self.dim as f64 * ln_2pi + self.factor.log_det() + m))
    }

    /// Errors unless the model's dimension is `dim`.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if dim == self.dim {
            Ok(())
        } else {
            Err(Error::Dimension {
                expected: self.dim,
                found: dim,
            })
        }
    }

    fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            24 + self.means.len() * (12 + 8 * self.dim) + 8 * self.dim * self.dim,
        );
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.means.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.eps.to_le_bytes());
        for (cat, mu) in &self.means {
            out.extend_from_slice(&cat.0.to_le_bytes());
            out.extend_from_slice(&self.counts[cat].to_le_bytes());
            for v in mu {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in &self.covariance {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Checksum stored in the model file and echoed in score files.
    pub fn checksum(&self) -> u64 {
        checksum(&self.payload_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.payload_bytes();
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MODEL_MAGIC {
            return Err(Error::Format("not a UQGM0001 model file".into()));
        }
        let corrupt = |what: &str| Error::Corrupt(format!("model file truncated in {what}"));
        let mut pos = 8;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| corrupt(what))?;
            pos += n;
            Ok(s)
        };
        let dim = u32::from_le_bytes(take(4, "header")?.try_into().unwrap()) as usize;
        let classes = u32::from_le_bytes(take(4, "header")?.try_into().unwrap()) as usize;
        let eps = f64::from_le_bytes(take(8, "header")?.try_into().unwrap());
        let expected_len = (dim as u64)
            .checked_mul(8)
            .and_then(|d8| d8.checked_add(12))
            .and_then(|per| per.checked_mul(classes as u64))
            .and_then(|c| c.checked_add((dim as u64).checked_mul(dim as u64)?.checked_mul(8)?))
            .and_then(|c| c.checked_add(24 + 8))
            .ok_or_else(|| Error::Corrupt("model dimensions overflow".into()))?;
        if bytes.len() as u64 != expected_len {
            return Err(Error::Corrupt(format!(
                "model file is {} bytes, header implies {expected_len}",
                bytes.len()
            )));
        }
        let f64s = |s: &[u8]| -> Vec<f64> {
            s.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let mut means = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for _ in 0..classes {
            let cat = CategoryId(u32::from_le_bytes(
                take(4, "class header")?.try_into().unwrap(),
            ));
            let n = u64::from_le_bytes(take(8, "class header")?.try_into().unwrap());
            let mu = f64s(take(8 * dim, "class mean")?);
            if means.insert(cat, mu).is_some() {
                return Err(Error::Corrupt(format!("class {cat} appears twice")));
            }
            counts.insert(cat, n);
        }
        let covariance = f64s(take(8 * dim * dim, "covariance")?);
        let stored = u64::from_le_bytes(take(8, "checksum")?.try_into().unwrap());
        let computed = checksum(&bytes[..bytes.len() - 8]);
        if stored != computed {
            return Err(Error::Corrupt(format!(
                "model checksum mismatch: stored {stored:016x}, computed {computed:016x}"
            )));
        }
        Self::from_parts(dim, means, counts, covariance, eps)
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Lower bound on the smallest eigenvalue by Gershgorin discs.
fn gershgorin_lower_bound(a: &[f64], dim: usize) -> f64 {
    (0..dim)
        .map(|i| {
            let off: f64 = (0..dim)
                .filter(|&j| j != i)
                .map(|j| a[i * dim + j].abs())
                .sum();
            a[i * dim + i] - off
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn save_model(model: &ClassConditionalGaussian, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ClassConditionalGaussian> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ClassConditionalGaussian::from_bytes(&bytes)
}
