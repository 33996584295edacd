//! Command layer shared by the CLI and the QC service: calibrate, segment,
//! evaluate, synthesize, train, and the project manifest.

mod calibrate;
mod commands;
mod project;
pub mod service;

pub use calibrate::{calibrate_file, calibrate_image, read_calibration, write_templates, TemplateSet};
pub use commands::{
    evaluate_dirs, segment_image, segment_path, synth_dataset, train_dataset, EvaluateOptions, EvaluateOutcome,
    SegmentOutcome, Segmenter, TrainOptions, TrainRun,
};
pub use project::{
    calibrate_case, segment_case, CaseRecord, CaseState, ProjectManifest, ProjectSettings, QcEntry, QcRating,
    PROJECT_FILE, PROJECT_VERSION,
};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::GeometryError;
use crate::metrics::MetricsError;
use crate::raster::io::IoError;
use crate::raster::RasterError;
use crate::synth::SynthError;
use crate::unet::UNetError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("calibration missing: {0}")]
    CalibrationMissing(String),
    #[error("unpaired files: {}", .0.join(", "))]
    UnpairedFiles(Vec<String>),
    #[error("{0}")]
    ModelLoadFailure(String),
    #[error("{0}")]
    EmptyDataset(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    UNet(UNetError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<UNetError> for PipelineError {
    fn from(e: UNetError) -> Self {
        match e {
            UNetError::ModelLoadFailure(m) => PipelineError::ModelLoadFailure(m),
            UNetError::EmptyDataset(m) => PipelineError::EmptyDataset(m),
            other => PipelineError::UNet(other),
        }
    }
}

impl PipelineError {
    /// Stable machine-readable name used in error JSON.
    pub fn kind(&self) -> String {
        match self {
            PipelineError::CalibrationMissing(_) => "CalibrationMissing".into(),
            PipelineError::UnpairedFiles(_) => "UnpairedFiles".into(),
            PipelineError::ModelLoadFailure(_) => "ModelLoadFailure".into(),
            PipelineError::EmptyDataset(_) => "EmptyDataset".into(),
            PipelineError::InvalidInput(_) => "InvalidInput".into(),
            PipelineError::NotFound(_) => "NotFound".into(),
            PipelineError::Conflict(_) => "Conflict".into(),
            PipelineError::Geometry(e) => variant_name(e),
            PipelineError::Metrics(e) => variant_name(e),
            PipelineError::Synth(e) => variant_name(e),
            PipelineError::UNet(e) => variant_name(e),
            PipelineError::Io(_) | PipelineError::File { .. } => "IoFailure".into(),
            PipelineError::Raster(e) => variant_name(e),
        }
    }

    pub fn to_json(&self) -> ErrorJson {
        ErrorJson {
            kind: self.kind(),
            detail: self.to_string(),
        }
    }
}

/// First identifier of the `Debug` form, which is the variant name.
fn variant_name<E: std::fmt::Debug>(e: &E) -> String {
    let text = format!("{e:?}");
    text.split(|c: char| !c.is_alphanumeric() && c != '_')
        .next()
        .unwrap_or("Error")
        .to_string()
}

/// `{"kind": ..., "detail": ...}` as written to stderr and HTTP bodies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorJson {
    pub kind: String,
    pub detail: String,
}

pub(crate) fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::File {
        path: path.display().to_string(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&fs::read(path).map_err(file_err(path))?))
}

/// Write to a sibling temporary file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(file_err(&tmp))?;
    fs::rename(&tmp, path).map_err(file_err(path))
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    write_atomic(path, text.as_bytes())
}

/// Sorted `*.png` files of a directory, or the file itself.
pub fn list_pngs(path: &Path) -> Result<Vec<std::path::PathBuf>, PipelineError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out: Vec<_> = fs::read_dir(path)
        .map_err(file_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

pub(crate) fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Record of one command invocation: everything needed to replay it.
/// Contains no timestamps or absolute paths so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub parameters: serde_json::Value,
    /// File name to sha256.
    pub inputs: std::collections::BTreeMap<String, String>,
    pub outputs: std::collections::BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, parameters: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            parameters,
            inputs: Default::default(),
            outputs: Default::default(),
        }
    }
}
