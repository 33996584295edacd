//! Versioned parameter container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! [`ModelHeader`], then every tensor in header order as little-endian
//! elements of the header dtype. All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::infer::{foreground_probability, predict};
use super::{ParamTensor, Real, UNetConfig, UNetError, UNetParams};
use crate::raster::{BinaryMask, RasterImage};

pub const MODEL_MAGIC: &[u8; 8] = b"SLABSEGM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    /// Seed of the run that produced the parameters.
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub created_unix: u64,
    pub tool_version: String,
    /// Free-form provenance: training config, fold index, dataset hash.
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl ModelMetadata {
    pub fn now(seed: u64, extra: serde_json::Value) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            seed,
            created_unix,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            extra,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub dtype: String,
    pub config: UNetConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
    pub metadata: ModelMetadata,
}

/// Parameters of either precision, as stored.
#[derive(Debug, Clone)]
pub enum AnyModel {
    F32(UNetParams<f32>),
    F64(UNetParams<f64>),
}

impl AnyModel {
    pub fn config(&self) -> &UNetConfig {
        match self {
            AnyModel::F32(p) => &p.config,
            AnyModel::F64(p) => &p.config,
        }
    }

    pub fn predict(&self, img: &RasterImage) -> Result<BinaryMask, UNetError> {
        match self {
            AnyModel::F32(p) => predict(p, img),
            AnyModel::F64(p) => predict(p, img),
        }
    }

    pub fn foreground_probability(&self, img: &RasterImage) -> Result<Vec<f64>, UNetError> {
        match self {
            AnyModel::F32(p) => foreground_probability(p, img),
            AnyModel::F64(p) => foreground_probability(p, img),
        }
    }

    pub fn to_f32(&self) -> UNetParams<f32> {
        match self {
            AnyModel::F32(p) => p.clone(),
            AnyModel::F64(p) => p.cast(),
        }
    }
}

/// Writes the container via a temporary file and rename.
pub fn save_model<T: Real>(path: &Path, params: &UNetParams<T>, metadata: ModelMetadata) -> Result<(), UNetError> {
    params.validate()?;
    let mut payload = Vec::with_capacity(params.parameter_count() * T::BYTES);
    for t in &params.tensors {
        for &v in &t.data {
            v.write_le(&mut payload);
        }
    }
    let header = ModelHeader {
        dtype: T::DTYPE.to_string(),
        config: params.config.clone(),
        tensors: params
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        payload_bytes: payload.len() as u64,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        metadata,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| UNetError::ModelWriteFailure(e.to_string()))?;

    let fail = |e: std::io::Error| UNetError::ModelWriteFailure(format!("{}: {e}", path.display()));
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(fail)?;
        f.write_all(MODEL_MAGIC).map_err(fail)?;
        f.write_all(&MODEL_VERSION.to_le_bytes()).map_err(fail)?;
        f.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(fail)?;
        f.write_all(&header_json).map_err(fail)?;
        f.write_all(&payload).map_err(fail)?;
        f.sync_all().map_err(fail)?;
    }
    fs::rename(&tmp, path).map_err(fail)
}

fn decode<T: Real>(header: &ModelHeader, payload: &[u8]) -> Result<UNetParams<T>, UNetError> {
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let bytes = &payload[offset..offset + n * T::BYTES];
        offset += n * T::BYTES;
        tensors.push(ParamTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: bytes.chunks_exact(T::BYTES).map(T::read_le).collect(),
        });
    }
    let params = UNetParams {
        config: header.config.clone(),
        tensors,
    };
    params
        .validate()
        .map_err(|e| UNetError::ModelLoadFailure(format!("parameters inconsistent with config: {e}")))?;
    Ok(params)
}

/// Reads and verifies a container. Any structural problem, including a
/// payload hash mismatch, is a `ModelLoadFailure`.
pub fn load_model(path: &Path) -> Result<(AnyModel, ModelHeader), UNetError> {
    let bad = |m: String| UNetError::ModelLoadFailure(format!("{}: {m}", path.display()));
    let bytes = fs::read(path).map_err(|e| bad(e.to_string()))?;
    if bytes.len() < 20 || &bytes[..8] != MODEL_MAGIC {
        return Err(bad("not a model container".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != MODEL_VERSION {
        return Err(bad(format!("format version {version}, expected {MODEL_VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(20))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file".into()))?;
    let header: ModelHeader =
        serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(format!("header: {e}")))?;
    header.config.validate().map_err(|e| bad(e.to_string()))?;
    let payload = &bytes[header_end..];
    if payload.len() as u64 != header.payload_bytes {
        return Err(bad(format!(
            "payload is {} bytes, header says {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch".into()));
    }
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(format!("unknown dtype {other}"))),
    };
    let elements: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if elements * width != payload.len() {
        return Err(bad("tensor shapes do not match payload size".into()));
    }
    let model = match width {
        4 => AnyModel::F32(decode(&header, payload)?),
        _ => AnyModel::F64(decode(&header, payload)?),
    };
    Ok((model, header))
}
