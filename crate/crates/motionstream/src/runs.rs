//! Experiment output layout: `runs/<name>/<timestamp>/` plus a `latest`
//! symlink next to the timestamped directories.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// `YYYYMMDDTHHMMSS` in UTC, with a numeric suffix if the directory exists.
pub fn create_run_dir(root: &Path, name: &str) -> Result<PathBuf> {
    let base = root.join(name);
    fs::create_dir_all(&base).with_context(|| format!("creating {}", base.display()))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S").to_string();
    let mut dir = base.join(&stamp);
    let mut k = 1;
    while dir.exists() {
        dir = base.join(format!("{stamp}-{k}"));
        k += 1;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    point_latest(&base, &dir)?;
    Ok(dir)
}

/// Repoints `<base>/latest` at `dir` (relative link).
pub fn point_latest(base: &Path, dir: &Path) -> Result<()> {
    let link = base.join("latest");
    if link.symlink_metadata().is_ok() {
        fs::remove_file(&link).with_context(|| format!("removing {}", link.display()))?;
    }
    let target = dir.file_name().map(PathBuf::from).unwrap_or_else(|| dir.to_path_buf());
    #[cfg(unix)]
    std::os::unix::fs::symlink(&target, &link).with_context(|| format!("linking {}", link.display()))?;
    #[cfg(not(unix))]
    fs::write(&link, target.to_string_lossy().as_bytes())?;
    Ok(())
}
