//! One invocation per run directory, enforced through an exclusive lock
//! file that is removed on drop.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::CliError;

#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(run_dir)?;
        let path = run_dir.join("run.lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(err) if err.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Usage(format!(
                    "run directory {} is locked by another invocation; pick a different \
                     --run-dir or remove {} if it is stale",
                    run_dir.display(),
                    path.display()
                )))
            }
            Err(err) => Err(err.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_acquisition_fails_with_usage_code() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        let err = RunLock::acquire(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        drop(lock);
        // Releasing the first lock frees the directory.
        RunLock::acquire(dir.path()).unwrap();
    }
}
