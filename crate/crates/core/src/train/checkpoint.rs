//! FLO1 optimizer-state files (same container layout as weights) plus the
//! checkpoint naming scheme.
//!
//! Checkpoint state is quantized to the file precision on every save, and
//! training reloads what it just wrote, so a resumed run continues from
//! exactly the state a non-resumed run carries forward.

use super::adam::AdamState;
use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const FLO_MAGIC: [u8; 4] = *b"FLO1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimMeta {
    /// Epochs fully completed before this checkpoint.
    pub epochs_completed: usize,
    pub step: u64,
    pub lr: f64,
    /// Best validation loss so far; `None` before any validation pass.
    pub best_val: Option<f64>,
    pub stale_epochs: usize,
    pub skipped_steps_total: usize,
}

pub fn optimizer_to_bytes(state: &AdamState, meta: &OptimMeta) -> Result<Vec<u8>> {
    let mut w = ContainerWriter::new(FLO_MAGIC);
    w.push("m", &[state.m.len()], &state.m);
    w.push("v", &[state.v.len()], &state.v);
    let meta = serde_json::to_string(meta)
        .map_err(|e| Error::Numerical(format!("optimizer meta serialization: {e}")))?;
    Ok(w.finish(Some(&meta)))
}

pub fn save_optimizer(path: &Path, state: &AdamState, meta: &OptimMeta) -> Result<()> {
    std::fs::write(path, optimizer_to_bytes(state, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load_optimizer(path: &Path, expected_len: usize) -> Result<(AdamState, OptimMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ContainerReader::new(&bytes, FLO_MAGIC, path)?;
    let m = r.next_expected("m", &[expected_len])?;
    let v = r.next_expected("v", &[expected_len])?;
    let meta_json = r.finish()?.ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        kind: crate::error::FormatErrorKind::Corrupt("optimizer file lacks its meta block".into()),
    })?;
    let meta: OptimMeta = serde_json::from_str(&meta_json).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        kind: crate::error::FormatErrorKind::Corrupt(format!("optimizer meta json: {e}")),
    })?;
    let mut state = AdamState { m, v, step: meta.step };
    // container storage is f32; keep in-memory state identical to it
    for x in state.m.iter_mut().chain(state.v.iter_mut()) {
        *x = *x as f32 as f64;
    }
    Ok((state, meta))
}

/// File paths belonging to one checkpoint prefix.
#[derive(Debug, Clone)]
pub struct CheckpointPaths {
    pub weights: PathBuf,
    pub optimizer: PathBuf,
    pub best_weights: PathBuf,
}

impl CheckpointPaths {
    pub fn at(dir: &Path, epoch: usize) -> Self {
        Self::from_prefix(&dir.join(format!("ckpt_epoch{epoch}")))
    }

    pub fn from_prefix(prefix: &Path) -> Self {
        let base = prefix.to_string_lossy().into_owned();
        CheckpointPaths {
            weights: PathBuf::from(format!("{base}.flw1")),
            optimizer: PathBuf::from(format!("{base}.flo1")),
            best_weights: PathBuf::from(format!("{base}.best.flw1")),
        }
    }
}
