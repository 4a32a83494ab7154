use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Tracks files a command creates and deletes them unless the run commits.
pub struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            committed: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Registers `name` inside the output directory and returns its path.
    pub fn path(&mut self, name: impl AsRef<Path>) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        if self.created_dir {
            let _ = fs::remove_dir_all(&self.dir);
            return;
        }
        for f in &self.files {
            if f.is_dir() {
                let _ = fs::remove_dir_all(f);
            } else {
                let _ = fs::remove_file(f);
            }
        }
    }
}
