//! Output locations that disappear again when the command fails.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub struct Output {
    path: PathBuf,
    dir: bool,
    existed: bool,
    committed: bool,
}

impl Output {
    /// Claims an output directory, which must be absent or empty.
    pub fn dir(path: &Path) -> Result<Self> {
        let existed = path.exists();
        if existed {
            if !path.is_dir() {
                bail!("output `{}` exists and is not a directory", path.display());
            }
            if fs::read_dir(path)?.next().is_some() {
                bail!("output directory `{}` is not empty", path.display());
            }
        }
        fs::create_dir_all(path).with_context(|| format!("creating `{}`", path.display()))?;
        Ok(Self { path: path.to_path_buf(), dir: true, existed, committed: false })
    }

    /// Claims an output file, which must not exist yet.
    pub fn file(path: &Path) -> Result<Self> {
        if path.exists() {
            bail!("output `{}` already exists", path.display());
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        Ok(Self { path: path.to_path_buf(), dir: false, existed: false, committed: false })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Output {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        if self.dir {
            let _ = fs::remove_dir_all(&self.path);
            if self.existed {
                let _ = fs::create_dir(&self.path);
            }
        } else {
            let _ = fs::remove_file(&self.path);
        }
    }
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing `{}`", path.display()))
}
