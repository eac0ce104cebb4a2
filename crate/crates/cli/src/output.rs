//! Output directories are filled under a temporary sibling name and renamed
//! into place, so a reader never sees a half-written run.

use std::fs;
use std::path::{Path, PathBuf};

use nnme::model::fmt_f64;
use serde::Serialize;

use crate::failure::{io_error, CliError};

pub struct Staging {
    dir: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path) -> Result<Staging, CliError> {
        let name = target
            .file_name()
            .ok_or_else(|| crate::failure::config_error(format!("--out {} has no directory name", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| io_error(&parent, e))?;
        let dir = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        }
        fs::create_dir(&dir).map_err(|e| io_error(&dir, e))?;
        Ok(Staging { dir, target: target.to_path_buf(), committed: false })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn write(&self, file: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.path(file);
        fs::write(&path, bytes).map_err(|e| io_error(&path, e))
    }

    pub fn json<T: Serialize + ?Sized>(&self, file: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| io_error(&self.path(file), e))?;
        text.push('\n');
        self.write(file, text)
    }

    pub fn table(&self, file: &str, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
        let path = self.path(file);
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_error(&path, e))?;
        w.write_record(header).map_err(|e| io_error(&path, e))?;
        for row in rows {
            w.write_record(&row).map_err(|e| io_error(&path, e))?;
        }
        w.flush().map_err(|e| io_error(&path, e))
    }

    /// Replaces any previous run at the target with the staged directory.
    pub fn commit(mut self) -> Result<(), CliError> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(|e| io_error(&self.target, e))?;
        }
        fs::rename(&self.dir, &self.target).map_err(|e| io_error(&self.target, e))?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

pub fn num(v: f64) -> String {
    fmt_f64(v)
}

pub fn coord_header(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("{prefix}{j}")).collect()
}
