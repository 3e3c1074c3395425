use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

/// Optional TOML file mirroring the command-line flags. Keys use the flag
/// names with `-` replaced by `_`; a flag given on the command line wins.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub annotations: Option<PathBuf>,
    pub features_dir: Option<PathBuf>,
    pub archive: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub pool: Option<String>,
    pub grid_layout: Option<String>,
    pub skip_missing: Option<bool>,
    pub include_crowd: Option<bool>,
    pub eps: Option<f64>,
    pub strategy: Option<String>,
    pub p: Option<f64>,
    pub bins: Option<u32>,
    pub hist_bins: Option<usize>,
    pub seed: Option<u64>,
    pub scope: Option<String>,
    pub drop_empty_images: Option<bool>,
    pub drop_unscored: Option<bool>,
    pub classes: Option<usize>,
    pub dim: Option<usize>,
    pub per_class: Option<usize>,
    pub separation: Option<f64>,
    pub contamination: Option<f64>,
    pub shift: Option<f64>,
    pub write_data: Option<bool>,
    pub input: Option<PathBuf>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub sign: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
