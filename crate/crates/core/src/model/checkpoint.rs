//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, version byte, little-endian `u32` header length,
//! a JSON header (config, fingerprint, parameter names and shapes), then
//! every parameter as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MXIDCKPT";
const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    fingerprint: String,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

impl Model {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            fingerprint: self.fingerprint.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamHeader {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(13 + json.len() + self.num_parameters() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.iter().flat_map(|p| &p.data) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 13 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        if bytes[8] != VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", bytes[8])));
        }
        let len = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(13..13 + len)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut model = build_model(&header.config)?;
        if model.fingerprint != header.fingerprint {
            return Err(bad(format!(
                "architecture fingerprint mismatch: file has {}, config builds {}",
                header.fingerprint, model.fingerprint
            )));
        }
        if header.params.len() != model.params.len()
            || header
                .params
                .iter()
                .zip(&model.params)
                .any(|(h, p)| h.name != p.name || h.shape != p.shape)
        {
            return Err(bad("parameter layout does not match the architecture".into()));
        }
        let mut body = &bytes[13 + len..];
        if body.len() != model.num_parameters() * 8 {
            return Err(bad("parameter payload has the wrong length".into()));
        }
        for p in &mut model.params {
            for v in p.data.iter_mut() {
                *v = f64::from_le_bytes(body[..8].try_into().expect("8 bytes"));
                body = &body[8..];
            }
        }
        if !model.all_finite() {
            return Err(bad("checkpoint holds non-finite parameters".into()));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, model.to_checkpoint_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Model::from_checkpoint_bytes(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}
