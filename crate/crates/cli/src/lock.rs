use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ebsde_core::{Error, Result};

const LOCK_NAME: &str = ".ebsde-lab.lock";

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)
            .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_NAME);
        let mut file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                ))
            } else {
                Error::Config(format!("cannot write to output directory {}: {e}", dir.display()))
            }
        })?;
        let _ = writeln!(file, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
