use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::calibrate::calibrate_image;
use super::commands::{segment_image, Segmenter};
use super::{file_err, sha256_file, write_json, PipelineError};
use crate::geometry::{CalibrationSidecar, CalibrationSpec, DEFAULT_MARGIN_MM, DEFAULT_TARGET_MM};
use crate::metrics::{evaluate_pair, EvalReport};
use crate::raster::io::{
    find_spacing, read_image, read_image_calibrated, read_mask_calibrated, sidecar_path, write_image, write_mask,
    write_spacing, BitDepth,
};

pub const PROJECT_FILE: &str = "project.json";
pub const PROJECT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseState {
    Raw,
    Calibrated,
    Segmented,
    Evaluated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcRating {
    Pass,
    Fail,
    Unrated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcEntry {
    pub rating: QcRating,
    pub rater: String,
    /// Seconds since the Unix epoch; 0 for the initial unrated state.
    pub timestamp: u64,
}

impl QcEntry {
    fn unrated() -> Self {
        Self {
            rating: QcRating::Unrated,
            rater: String::new(),
            timestamp: 0,
        }
    }
}

/// One photograph and everything derived from it. Paths are relative to the
/// project directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub image_id: String,
    pub raw_path: String,
    pub reference_path: Option<String>,
    pub calibration: Option<CalibrationSidecar>,
    pub rectified_path: Option<String>,
    pub prediction_path: Option<String>,
    pub eval: Option<EvalReport>,
    pub state: CaseState,
    /// Latest entry of `qc_history`, or unrated.
    pub qc: QcEntry,
    /// Append-only audit trail of ratings.
    pub qc_history: Vec<QcEntry>,
}

impl CaseRecord {
    /// Recalibrating discards any prediction made on the previous rectification.
    pub fn set_calibration(&mut self, sidecar: CalibrationSidecar, rectified_path: String) {
        self.calibration = Some(sidecar);
        self.rectified_path = Some(rectified_path);
        self.prediction_path = None;
        self.eval = None;
        self.state = CaseState::Calibrated;
    }

    pub fn set_prediction(&mut self, path: String, eval: Option<EvalReport>) -> Result<(), PipelineError> {
        if self.state == CaseState::Raw {
            return Err(PipelineError::Conflict(format!(
                "case {} must be calibrated before segmentation",
                self.image_id
            )));
        }
        self.prediction_path = Some(path);
        self.state = if eval.is_some() {
            CaseState::Evaluated
        } else {
            CaseState::Segmented
        };
        self.eval = eval;
        Ok(())
    }

    pub fn add_qc(&mut self, rating: QcRating, rater: String, timestamp: u64) -> Result<(), PipelineError> {
        if self.prediction_path.is_none() {
            return Err(PipelineError::Conflict(format!(
                "case {} has no prediction to rate",
                self.image_id
            )));
        }
        if rating == QcRating::Unrated {
            return Err(PipelineError::InvalidInput("rating must be pass or fail".into()));
        }
        let entry = QcEntry {
            rating,
            rater,
            timestamp,
        };
        self.qc = entry.clone();
        self.qc_history.push(entry);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectSettings {
    /// Rectification resolution, mm/px.
    pub target_mm: f64,
    pub margin_mm: f64,
    pub band_mm: f64,
    pub threshold_mm: f64,
}

impl Default for ProjectSettings {
    fn default() -> Self {
        Self {
            target_mm: DEFAULT_TARGET_MM,
            margin_mm: DEFAULT_MARGIN_MM,
            band_mm: 10.0,
            threshold_mm: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectManifest {
    pub version: u32,
    pub tool_version: String,
    pub settings: ProjectSettings,
    /// Model containers, relative to the project directory or absolute.
    pub models: Vec<String>,
    /// File name to sha256 for every model and config the project depends on.
    pub config_hashes: BTreeMap<String, String>,
    pub cases: Vec<CaseRecord>,
}

fn is_safe_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl ProjectManifest {
    /// Creates `dir/project.json` with no cases.
    pub fn init(dir: &Path, models: &[String]) -> Result<Self, PipelineError> {
        let path = dir.join(PROJECT_FILE);
        if path.exists() {
            return Err(PipelineError::Conflict(format!("{} already exists", path.display())));
        }
        fs::create_dir_all(dir).map_err(file_err(dir))?;
        let mut config_hashes = BTreeMap::new();
        for m in models {
            let p = dir.join(m);
            if !p.is_file() {
                return Err(PipelineError::ModelLoadFailure(format!(
                    "{} does not exist",
                    p.display()
                )));
            }
            config_hashes.insert(m.clone(), sha256_file(&p)?);
        }
        let manifest = Self {
            version: PROJECT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            settings: ProjectSettings::default(),
            models: models.to_vec(),
            config_hashes,
            cases: Vec::new(),
        };
        manifest.save(dir)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(PROJECT_FILE);
        if !path.is_file() {
            return Err(PipelineError::NotFound(format!("{} does not exist", path.display())));
        }
        let text = fs::read_to_string(&path).map_err(file_err(&path))?;
        let m: Self =
            serde_json::from_str(&text).map_err(|e| PipelineError::InvalidInput(format!("{}: {e}", path.display())))?;
        if m.version != PROJECT_VERSION {
            return Err(PipelineError::InvalidInput(format!(
                "project version {}, expected {PROJECT_VERSION}",
                m.version
            )));
        }
        Ok(m)
    }

    /// Atomic write-temp-then-rename.
    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        write_json(&dir.join(PROJECT_FILE), self)
    }

    pub fn case(&self, id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.image_id == id)
    }

    pub fn case_mut(&mut self, id: &str) -> Option<&mut CaseRecord> {
        self.cases.iter_mut().find(|c| c.image_id == id)
    }

    /// Copies a raw photo (and optionally a reference mask with its spacing)
    /// into the project and registers a new case.
    pub fn add_case(
        &mut self,
        dir: &Path,
        id: &str,
        image: &Path,
        reference: Option<&Path>,
    ) -> Result<&CaseRecord, PipelineError> {
        if !is_safe_id(id) {
            return Err(PipelineError::InvalidInput(format!(
                "case id {id:?} must be non-empty ASCII letters, digits, '-' or '_'"
            )));
        }
        if self.case(id).is_some() {
            return Err(PipelineError::Conflict(format!("case {id} already exists")));
        }
        let copy = |src: &Path, sub: &str| -> Result<String, PipelineError> {
            let rel = format!("{sub}/{id}.png");
            let dst = dir.join(&rel);
            fs::create_dir_all(dir.join(sub)).map_err(file_err(dir))?;
            fs::copy(src, &dst).map_err(file_err(src))?;
            Ok(rel)
        };
        let raw_path = copy(image, "raw")?;
        let reference_path = match reference {
            Some(r) => {
                let spacing = find_spacing(r)?.ok_or_else(|| {
                    PipelineError::CalibrationMissing(format!("reference {} has no spacing sidecar", r.display()))
                })?;
                let rel = copy(r, "references")?;
                write_spacing(&sidecar_path(&dir.join(&rel)), spacing)?;
                Some(rel)
            }
            None => None,
        };
        self.cases.push(CaseRecord {
            image_id: id.to_string(),
            raw_path,
            reference_path,
            calibration: None,
            rectified_path: None,
            prediction_path: None,
            eval: None,
            state: CaseState::Raw,
            qc: QcEntry::unrated(),
            qc_history: Vec::new(),
        });
        Ok(self.cases.last().expect("just pushed"))
    }
}

/// Rectifies the raw photo of `case` into `rectified/<id>.png` with its
/// calibration sidecar. Returns the sidecar and the relative output path; the
/// caller records them on the case.
pub fn calibrate_case(
    dir: &Path,
    settings: &ProjectSettings,
    case: &CaseRecord,
    spec: &CalibrationSpec,
) -> Result<(CalibrationSidecar, String), PipelineError> {
    let img = read_image(&dir.join(&case.raw_path), None)?;
    let (out, sidecar) = calibrate_image(&img, spec, dir, settings.target_mm, settings.margin_mm)?;
    let rel = format!("rectified/{}.png", case.image_id);
    let path = dir.join(&rel);
    fs::create_dir_all(dir.join("rectified")).map_err(file_err(dir))?;
    write_image(&path, &out, BitDepth::Eight)?;
    write_json(&sidecar_path(&path), &sidecar)?;
    Ok((sidecar, rel))
}

/// Segments the rectified photo of `case` into `predictions/<id>.png` and
/// scores it against the reference when one exists.
pub fn segment_case(
    dir: &Path,
    settings: &ProjectSettings,
    case: &CaseRecord,
    seg: &Segmenter,
) -> Result<(String, Option<EvalReport>), PipelineError> {
    let rectified = match (&case.rectified_path, case.state) {
        (Some(p), s) if s != CaseState::Raw => p,
        _ => {
            return Err(PipelineError::Conflict(format!(
                "case {} must be calibrated before segmentation",
                case.image_id
            )))
        }
    };
    let img = read_image_calibrated(&dir.join(rectified))?;
    let mask = segment_image(seg, &img)?;
    let rel = format!("predictions/{}.png", case.image_id);
    let path = dir.join(&rel);
    fs::create_dir_all(dir.join("predictions")).map_err(file_err(dir))?;
    write_mask(&path, &mask)?;
    write_spacing(&sidecar_path(&path), mask.spacing().expect("calibrated input"))?;
    let eval = match &case.reference_path {
        Some(r) => {
            let reference = read_mask_calibrated(&dir.join(r))?;
            Some(evaluate_pair(
                &case.image_id,
                &mask,
                &reference,
                settings.band_mm,
                settings.threshold_mm,
            )?)
        }
        None => None,
    };
    Ok((rel, eval))
}

impl ProjectManifest {
    /// Segmenter for the models the project lists, or `None` when it has none.
    pub fn segmenter(&self, dir: &Path) -> Result<Option<Segmenter>, PipelineError> {
        if self.models.is_empty() {
            return Ok(None);
        }
        let paths: Vec<_> = self.models.iter().map(|m| dir.join(m)).collect();
        Segmenter::load(&paths).map(Some)
    }
}
