use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::trainer::{EpochRecord, RetrieverMetrics};
use super::{TrainConfig, TrainError};
use crate::embedder::ProjectionHead;
use crate::store::{put_str, Cursor};

const HEAD_MAGIC: &[u8; 8] = b"HICLHD01";

/// The selected head plus the validation scores that selected it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub head: ProjectionHead,
    pub epoch: usize,
    pub validation_metric: f64,
    pub validation_mrr: f64,
    pub config_hash: String,
}

/// Sidecar JSON written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub config: TrainConfig,
    pub config_hash: String,
    pub n_train: usize,
    pub n_validation: usize,
    pub baseline: RetrieverMetrics,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best: RetrieverMetrics,
}

pub fn history_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("history.json")
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> TrainError {
    TrainError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub(crate) fn encode_head(head: &ProjectionHead, config_hash: &str) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + head.weights().len() * 8);
    buf.extend_from_slice(HEAD_MAGIC);
    buf.extend_from_slice(&head.version.to_le_bytes());
    buf.extend_from_slice(&(head.dim() as u32).to_le_bytes());
    put_str(&mut buf, &head.base_model_id);
    put_str(&mut buf, config_hash);
    for w in head.weights() {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    buf
}

pub(crate) fn decode_head(bytes: &[u8]) -> Result<(ProjectionHead, String), String> {
    let mut c = Cursor::new(bytes);
    if c.take(8)? != HEAD_MAGIC {
        return Err("bad magic".into());
    }
    let version = c.u32()?;
    let dim = c.u32()? as usize;
    let base_model_id = c.string()?;
    let config_hash = c.string()?;
    let n = dim.checked_mul(dim).and_then(|n| n.checked_mul(8)).ok_or("dimension overflow")?;
    let weights = c
        .take(n)?
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if !c.finished() {
        return Err("trailing bytes".into());
    }
    let head = ProjectionHead::from_weights(dim, weights, base_model_id, version).map_err(|e| e.to_string())?;
    Ok((head, config_hash))
}

/// Writes the binary head (header + row-major little-endian f64 weights) and its history sidecar.
pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint, history: &TrainingHistory) -> Result<(), TrainError> {
    fs::write(path, encode_head(&checkpoint.head, &checkpoint.config_hash))
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    let side = history_path(path);
    let json = serde_json::to_string_pretty(history).expect("serializable");
    fs::write(&side, json + "\n").map_err(|e| ckpt_err(&side, e.to_string()))
}

pub fn read_checkpoint(path: &Path) -> Result<(Checkpoint, TrainingHistory), TrainError> {
    let bytes = fs::read(path).map_err(|e| ckpt_err(path, e.to_string()))?;
    let (head, config_hash) = decode_head(&bytes).map_err(|m| ckpt_err(path, m))?;
    let side = history_path(path);
    let text = fs::read_to_string(&side).map_err(|e| ckpt_err(&side, e.to_string()))?;
    let history: TrainingHistory = serde_json::from_str(&text).map_err(|e| ckpt_err(&side, e.to_string()))?;
    if history.config_hash != config_hash {
        return Err(ckpt_err(path, "history sidecar belongs to a different run"));
    }
    Ok((
        Checkpoint {
            head,
            epoch: history.best_epoch,
            validation_metric: history.best.pairwise_accuracy,
            validation_mrr: history.best.mrr,
            config_hash,
        },
        history,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_codec_is_bit_exact() {
        let w: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin() / 3.0 + f64::EPSILON).collect();
        let head = ProjectionHead::from_weights(3, w, "base-model", 4).unwrap();
        let bytes = encode_head(&head, "abc");
        let (back, hash) = decode_head(&bytes).unwrap();
        assert_eq!(hash, "abc");
        assert_eq!(back.version, 4);
        let bits = |h: &ProjectionHead| h.weights().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&head));
        assert!(decode_head(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_head(b"HICLVEC1").is_err());
    }
}
