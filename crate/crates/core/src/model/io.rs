//! FLW1 weights files: the named-tensor container with the model config
//! echoed in the provenance block.

use super::weights::MFliNetWeights;
use super::ModelConfig;
use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{Error, FormatErrorKind, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FLW_MAGIC: [u8; 4] = *b"FLW1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightsMeta {
    config: ModelConfig,
    /// Seed the surrounding run was launched with, for provenance.
    run_seed: Option<u64>,
}

pub fn weights_to_bytes(w: &MFliNetWeights, run_seed: Option<u64>) -> Result<Vec<u8>> {
    let mut out = ContainerWriter::new(FLW_MAGIC);
    for (name, t) in w.visit_tensors() {
        out.push(&name, &t.shape, &t.data);
    }
    let meta = serde_json::to_string(&WeightsMeta {
        config: w.cfg,
        run_seed,
    })
    .map_err(|e| Error::Numerical(format!("weights provenance serialization: {e}")))?;
    Ok(out.finish(Some(&meta)))
}

pub fn save_weights(path: &Path, w: &MFliNetWeights, run_seed: Option<u64>) -> Result<()> {
    let bytes = weights_to_bytes(w, run_seed)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load weights, validating every tensor's declared shape against the
/// architecture. When `expected` is given, the file's config must match
/// it; otherwise the embedded config is used.
pub fn load_weights(path: &Path, expected: Option<&ModelConfig>) -> Result<MFliNetWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    weights_from_bytes(&bytes, path, expected)
}

pub fn weights_from_bytes(
    bytes: &[u8],
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<MFliNetWeights> {
    // the provenance block carries the architecture; find it by parsing the
    // container twice: once to reach the meta, once schema-checked
    let embedded = peek_config(bytes, path)?;
    let cfg = match expected {
        Some(want) => {
            // shape validation below reports any architecture mismatch in
            // terms of the first disagreeing tensor
            *want
        }
        None => embedded,
    };
    cfg.validate()?;
    let mut w = MFliNetWeights::init(&cfg)?;
    let mut reader = ContainerReader::new(bytes, FLW_MAGIC, path)?;
    for (name, t) in w.visit_tensors_mut() {
        let data = reader.next_expected(&name, &t.shape)?;
        t.data = data;
    }
    reader.finish()?;
    Ok(w)
}

/// Read only the embedded model config from a weights file.
pub fn peek_config(bytes: &[u8], path: &Path) -> Result<ModelConfig> {
    let embedded = peek_meta(bytes, path)?;
    Ok(embedded.config)
}

fn peek_meta(bytes: &[u8], path: &Path) -> Result<WeightsMeta> {
    // validate the header, then locate the self-describing trailing block
    ContainerReader::new(bytes, FLW_MAGIC, path)?;
    let json = scan_trailing_meta(bytes).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        kind: FormatErrorKind::Corrupt("weights file lacks the provenance block".into()),
    })?;
    serde_json::from_str(json).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        kind: FormatErrorKind::Corrupt(format!("provenance json: {e}")),
    })
}

/// Find the trailing `META | u32 len | json` block: the marker whose
/// declared length reaches exactly the end of the file.
fn scan_trailing_meta(bytes: &[u8]) -> Option<&str> {
    let n = bytes.len();
    for header in (0..n.saturating_sub(7)).rev() {
        if &bytes[header..header + 4] != b"META" {
            continue;
        }
        let declared = u32::from_le_bytes([
            bytes[header + 4],
            bytes[header + 5],
            bytes[header + 6],
            bytes[header + 7],
        ]) as usize;
        if header + 8 + declared == n {
            return std::str::from_utf8(&bytes[header + 8..]).ok();
        }
    }
    None
}
