//! Model files: a JSON header (spec, metadata, checksum) and a raw
//! little-endian `f32` parameter payload beside it (`name.json` / `name.bin`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::network::{Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::util::{sha256_hex, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    ShapeModel,
    Regressor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelHeader {
    pub kind: ModelKind,
    pub spec: NetworkSpec,
    pub param_count: usize,
    /// File name of the payload, relative to the header.
    pub payload: String,
    /// SHA-256 of the payload bytes.
    pub checksum_sha256: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn payload_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("bin")
}

pub fn save_network(
    net: &Network,
    kind: ModelKind,
    metadata: serde_json::Value,
    json_path: &Path,
) -> Result<()> {
    let mut payload = Vec::with_capacity(net.params().len() * 4);
    for &p in net.params() {
        payload.extend_from_slice(&(p as f32).to_le_bytes());
    }
    let bin = payload_path(json_path);
    let header = ModelHeader {
        kind,
        spec: net.spec().clone(),
        param_count: net.params().len(),
        payload: bin
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        checksum_sha256: sha256_hex(&payload),
        metadata,
    };
    write_atomic(&bin, &payload)?;
    write_atomic(json_path, serde_json::to_string_pretty(&header)?.as_bytes())
}

/// Loads a model, refusing payloads whose checksum does not match the header.
pub fn load_network(json_path: &Path) -> Result<(Network, ModelHeader)> {
    let header: ModelHeader = serde_json::from_slice(&fs::read(json_path)?)?;
    let bin = json_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.payload);
    let payload = fs::read(&bin)?;
    let actual = sha256_hex(&payload);
    if actual != header.checksum_sha256 {
        return Err(Error::Checksum {
            expected: header.checksum_sha256.clone(),
            actual,
        });
    }
    if payload.len() != header.param_count * 4 {
        return Err(Error::Format(format!(
            "payload holds {} bytes for {} parameters",
            payload.len(),
            header.param_count
        )));
    }
    let params = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let net = Network::with_params(header.spec.clone(), params)?;
    Ok((net, header))
}
