//! Checkpoint file format: magic bytes, a length-prefixed JSON header
//! (model config, vocabulary hash, sequence layout), then the raw
//! little-endian 32-bit parameter buffers in declaration order.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::tokens::SequenceLayout;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MDDWM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub layout: SequenceLayout,
    pub train_step: u64,
    /// Hash of the dataset manifest the model was trained on, if any.
    pub dataset_hash: Option<String>,
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, meta: &CheckpointMeta) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let header = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for p in &model.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    crate::commands::write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 6];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file truncated before magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint("file truncated before header".into()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header)
        .map_err(|_| Error::Checkpoint("file truncated inside header".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut model: Model<f32> = Model::new(meta.config.clone())?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    if raw.len() != model.n_params() * 4 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            model.n_params() * 4,
            raw.len()
        )));
    }
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        model.params[i] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok((model, meta))
}

/// Load and reject checkpoints produced under a different vocabulary.
pub fn load_checkpoint_verified(
    path: &Path,
    expected_vocab_hash: &str,
) -> Result<(Model<f32>, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    if meta.vocab_hash != expected_vocab_hash {
        return Err(Error::Checkpoint(format!(
            "vocabulary hash mismatch: checkpoint {}, expected {}",
            meta.vocab_hash, expected_vocab_hash
        )));
    }
    Ok((model, meta))
}
