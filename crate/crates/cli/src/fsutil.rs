use std::fs;
use std::path::{Path, PathBuf};

use sonovis_diff::checkpoint::{commit_dir, staging_path};

use crate::error::{CliError, Result};

pub fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

/// Writes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.partial-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// A directory artifact built off to the side and moved into place whole.
/// Dropped without [`Staged::commit`], the partial directory stays behind
/// under a dot-name next to the target.
pub struct Staged {
    pub dir: PathBuf,
    target: PathBuf,
}

impl Staged {
    pub fn new(target: &Path) -> Result<Self> {
        let dir = staging_path(target);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        mkdir(&dir)?;
        Ok(Staged {
            dir,
            target: target.to_path_buf(),
        })
    }

    pub fn commit(self) -> Result<()> {
        Ok(commit_dir(&self.dir, &self.target)?)
    }
}

pub fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::missing(p))
    }
}

pub fn require_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::missing(p))
    }
}
