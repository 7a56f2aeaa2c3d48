use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

/// Output directory of one run. Holding a `RunDir` holds its lock file,
/// which is removed again on drop.
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

pub const LOCK: &str = "run.lock";

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))
            .with_context(|| format!("creating run directory {}", root.display()))?;
        fs::create_dir_all(root.join("reports"))?;
        let lock = root.join(LOCK);
        let mut f = match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "{} is locked by another run (delete {} if no run is active)",
                root.display(),
                lock.display()
            ),
            Err(e) => return Err(e).with_context(|| format!("creating {}", lock.display())),
        };
        writeln!(f, "{}", std::process::id())?;
        Ok(RunDir {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// The `config.json` of the run a checkpoint was written by, if it sits in
/// the usual `<run>/checkpoints/` place.
pub fn config_beside(ckpt: &Path) -> Option<PathBuf> {
    let p = ckpt.parent()?.parent()?.join("config.json");
    p.is_file().then_some(p)
}
