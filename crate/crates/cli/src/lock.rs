//! Exclusive lock on a run or dataset directory.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use samga::Error;

pub const LOCK_FILE: &str = ".samga.lock";

pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, Error> {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            let reason = if e.kind() == std::io::ErrorKind::AlreadyExists {
                std::io::Error::new(e.kind(), "directory is locked by another samga process")
            } else {
                e
            };
            Error::Io {
                path: path.clone(),
                source: reason,
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
