//! Aleatoric-uncertainty scoring and curation for object-detection datasets.
//!
//! The pipeline pools one feature vector per annotated object out of a
//! per-image encoder feature grid, fits class-conditional Gaussians with a
//! shared covariance, turns each object's Mahalanobis distance into a
//! per-class normalized score in `[0, 1]`, and uses those scores to drop
//! noisy or redundant annotations. The [`regularizer`] module carries the
//! score-weighted entropy loss used at training time, and [`synth`] holds a
//! synthetic harness that checks the scores actually recover injected noise.
//!
//! ```no_run
//! use uqcurate::{density, features, filtering, scoring};
//!
//! # fn main() -> uqcurate::Result<()> {
//! let archive = features::read_archive("out/archive.uqfa")?;
//! let model = density::ClassConditionalGaussian::fit(&archive, density::Regularization::Auto)?;
//! let table = scoring::score_dataset(&model, &archive)?;
//! let result = filtering::filter_noise_global(&table, 0.95)?;
//! println!("kept {} of {}", result.kept.len(), table.records.len());
//! # Ok(())
//! # }
//! ```

pub mod dataset;
pub mod density;
mod error;
pub mod features;
pub mod filtering;
mod linalg;
pub mod regularizer;
pub mod scoring;
pub mod synth;

pub use dataset::{AnnotationId, CategoryId, ImageId};
pub use error::{Error, Result};
pub use linalg::Cholesky;
