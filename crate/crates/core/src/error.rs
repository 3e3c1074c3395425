use std::path::PathBuf;

use crate::dataset::{AnnotationId, CategoryId, ImageId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: malformed JSON at line {line}, column {column}: {message}")]
    Json {
        context: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid record: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("missing feature maps for images {}", join(.0))]
    MissingFeatureMaps(Vec<ImageId>),

    #[error("unknown annotation ids {}", join(.0))]
    UnknownAnnotations(Vec<AnnotationId>),

    #[error("categories not fitted in the model: {}", join(.0))]
    UnfittedClasses(Vec<CategoryId>),

    #[error(
        "covariance is not positive definite after regularization (eps = {eps:e}); \
         pivot {index} = {pivot:e}, smallest-eigenvalue estimate {min_eigen_estimate:e}"
    )]
    SingularModel {
        eps: f64,
        index: usize,
        pivot: f64,
        min_eigen_estimate: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the fitted model rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularModel { .. } | Error::UnfittedClasses(_)
        )
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    const SHOWN: usize = 20;
    let mut out: Vec<String> = items.iter().take(SHOWN).map(|i| i.to_string()).collect();
    if items.len() > SHOWN {
        out.push(format!("... ({} total)", items.len()));
    }
    out.join(", ")
}
