//! Checkpoint layout: one JSON header line, then the parameters as
//! little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConvClassifier, ModelConfig};
use crate::error::{Error, Result};

const FORMAT: &str = "covalign-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    /// Seed the model was initialised and trained from.
    pub seed: u64,
    pub n_params: usize,
}

pub fn save_checkpoint(model: &ConvClassifier, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        version: VERSION,
        config: model.config,
        seed,
        n_params: model.params.len(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    buf.reserve(model.params.len() * 8);
    for p in &model.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ConvClassifier> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = buf
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint header is not terminated".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&buf[..split])?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            header.format, header.version
        )));
    }
    header.config.validate()?;
    if header.n_params != header.config.n_params() {
        return Err(Error::Format("parameter count does not match the model config".into()));
    }
    let body = &buf[split + 1..];
    if body.len() != header.n_params * 8 {
        return Err(Error::Format(format!(
            "expected {} parameter bytes, found {}",
            header.n_params * 8,
            body.len()
        )));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(ConvClassifier {
        config: header.config,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = ConvClassifier::new(ModelConfig::for_shape(4, 64), 9).unwrap();
        save_checkpoint(&model, 7, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), model);
    }

    #[test]
    fn truncated_body_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = ConvClassifier::new(ModelConfig::for_shape(2, 64), 1).unwrap();
        save_checkpoint(&model, 7, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
