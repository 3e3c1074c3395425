use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

/// Collects a command's outputs as temporary files and renames them into
/// place only on [`Staged::commit`]. Dropping without committing removes
/// every temporary file, so a failed run leaves no partial outputs.
pub struct Staged {
    dir: PathBuf,
    pending: Vec<(PathBuf, PathBuf)>,
}

impl Staged {
    pub fn new(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Staged {
            dir: dir.to_path_buf(),
            pending: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let target = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.partial"));
        self.pending.push((tmp.clone(), target));
        fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))
    }

    pub fn commit(mut self) -> anyhow::Result<Vec<PathBuf>> {
        let pending = std::mem::take(&mut self.pending);
        let mut done = Vec::with_capacity(pending.len());
        for (tmp, target) in pending {
            fs::rename(&tmp, &target)
                .with_context(|| format!("moving output to {}", target.display()))?;
            done.push(target);
        }
        Ok(done)
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        for (tmp, _) in &self.pending {
            let _ = fs::remove_file(tmp);
        }
    }
}
