//! End-to-end experiment driver: data generation, the three training stages,
//! evaluation and embedding export. Every artifact lives under one output
//! directory.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embed;
pub mod evaluate;
pub mod train;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{KmtrError, Result};

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use config::{AccelerationSettings, ExperimentConfig, FinetuneSettings, ModelDims, StageSettings};
pub use data::{gen_data, Dataset, GenDataSummary, KspaceNorm, Split, Splits, Subject};
pub use embed::{export_embeddings, plot, EmbeddingTable};
pub use evaluate::{evaluate, score, sweep_r};
pub use train::{align, finetune, pretrain, AlignSummary, EncoderVariant, FinetuneMeta};

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LOG_DIR: &str = "logs";
pub const REPORT_DIR: &str = "reports";
pub const LOCK_FILE: &str = ".kmtr.lock";

pub fn checkpoint_path(out: &Path, name: &str) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("{name}.ckpt"))
}

pub fn log_path(out: &Path, name: &str) -> PathBuf {
    out.join(LOG_DIR).join(format!("{name}.csv"))
}

pub fn report_dir(out: &Path) -> PathBuf {
    out.join(REPORT_DIR)
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

/// Exclusive lock on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    /// Takes the lock, reclaiming it when the recorded owner process no longer exists.
    pub fn acquire(out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        let path = out.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id())?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if !stale(&path) {
                        return Err(KmtrError::Locked(path));
                    }
                    let _ = fs::remove_file(&path);
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(KmtrError::Locked(path))
    }
}

fn stale(path: &Path) -> bool {
    let Ok(pid) = fs::read_to_string(path).map(|s| s.trim().to_string()) else { return false };
    pid.parse::<u32>().is_ok() && Path::new("/proc/self").exists() && !Path::new("/proc").join(&pid).exists()
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
